import numpy as np
import pytest

from editbank import (
    EditConfig,
    ExemplarSet,
    InversionConfig,
    ValidationError,
    bank_init_from_text,
    cfg_combine,
    create_toy_backend,
    edit_image,
    euler_ancestral_step,
    karras_schedule,
    psnr,
    run_inversion,
)
from editbank.editor import attach_timesteps

# independently evaluated: (10^(1/7) + 0.5*(0.1^(1/7) - 10^(1/7)))^7
KARRAS_MIDDLE_3 = 1.4507321135661928


@pytest.fixture(scope="module")
def shift_bank(backend, shift_suite):
    config = InversionConfig(
        steps_per_segment=200, learning_rate=0.01, segments=5, seed=1
    )
    exemplars = ExemplarSet(pairs=shift_suite.datasets[0].load_train_pairs())
    bank, _ = run_inversion(backend, exemplars, "add a red tint", config)
    return bank


class TestKarrasSchedule:
    def test_endpoints_exact(self):
        schedule = karras_schedule(20, 0.02, 10.0, 7.0)
        assert schedule.sigmas[0] == 10.0
        assert schedule.sigmas[-2] == 0.02
        assert schedule.sigmas[-1] == 0.0
        assert schedule.steps == 20

    def test_strictly_decreasing(self):
        sigmas = karras_schedule(20, 0.02, 10.0, 7.0).sigmas
        assert all(a > b for a, b in zip(sigmas[:-1], sigmas[1:]))

    def test_three_step_interior_value(self):
        schedule = karras_schedule(3, 0.1, 10.0, 7.0)
        closed_form = (10 ** (1 / 7) + 0.5 * (0.1 ** (1 / 7) - 10 ** (1 / 7))) ** 7
        assert schedule.sigmas[1] == pytest.approx(KARRAS_MIDDLE_3, abs=1e-9)
        assert schedule.sigmas[1] == pytest.approx(closed_form, abs=1e-12)

    def test_single_step_collapses(self):
        schedule = karras_schedule(1, 0.02, 10.0, 7.0)
        assert schedule.sigmas.tolist() == [10.0, 0.0]

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValidationError):
            karras_schedule(0, 0.02, 10.0, 7.0)
        with pytest.raises(ValidationError):
            karras_schedule(5, 1.0, 0.5, 7.0)
        with pytest.raises(ValidationError):
            karras_schedule(5, 0.02, 10.0, 0.0)

    def test_attach_timesteps_maps_each_sigma(self, backend):
        schedule = attach_timesteps(karras_schedule(20, 0.02, 10.0, 7.0), backend)
        assert len(schedule.timesteps) == 20
        assert schedule.timesteps[0] == 999
        assert schedule.timesteps[-1] == 0
        assert all(
            schedule.timesteps[i] >= schedule.timesteps[i + 1] for i in range(19)
        )


class TestCfgCombine:
    def test_unit_scales_reduce_to_full(self, rng):
        e_u, e_i, e_f = (rng.standard_normal((4, 8, 8)) for _ in range(3))
        combined = cfg_combine(e_u, e_i, e_f, s_text=1.0, s_image=1.0)
        assert np.array_equal(combined, e_f)

    def test_zero_text_scale_reduces_to_image_branch(self, rng):
        e_u, e_i, e_f = (rng.standard_normal((4, 8, 8)) for _ in range(3))
        combined = cfg_combine(e_u, e_i, e_f, s_text=0.0, s_image=1.0)
        assert np.array_equal(combined, e_i)

    def test_scalar_arithmetic_with_default_scales(self):
        combined = cfg_combine(
            np.array(0.0), np.array(1.0), np.array(2.0), s_text=7.5, s_image=1.5
        )
        assert float(combined) == pytest.approx(9.0, abs=1e-12)

    def test_matches_literal_formula(self, rng):
        e_u, e_i, e_f = (rng.standard_normal((4, 8, 8)) for _ in range(3))
        combined = cfg_combine(e_u, e_i, e_f, s_text=7.5, s_image=1.5)
        literal = e_u + 1.5 * (e_i - e_u) + 7.5 * (e_f - e_i)
        assert np.allclose(combined, literal, atol=1e-12)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValidationError):
            cfg_combine(
                np.zeros((4, 8, 8)), np.zeros((4, 8, 8)), np.zeros((4, 8, 7)),
                s_text=1.0, s_image=1.0,
            )


class TestEulerAncestralStep:
    def test_terminal_step_is_deterministic(self, rng):
        x = rng.standard_normal((4, 8, 8))
        denoised = rng.standard_normal((4, 8, 8))
        out_a = euler_ancestral_step(x, 0.5, 0.0, denoised, np.random.default_rng(1))
        out_b = euler_ancestral_step(x, 0.5, 0.0, denoised, np.random.default_rng(2))
        assert np.array_equal(out_a, out_b)
        assert np.allclose(out_a, denoised, atol=1e-12)

    def test_zero_prediction_scales_state_by_drift_factor(self, rng):
        x = rng.standard_normal((4, 8, 8))
        sigma_from, sigma_to = 2.0, 1.0
        out = euler_ancestral_step(
            x, sigma_from, sigma_to, np.zeros_like(x), np.random.default_rng(0)
        )
        sigma_up = min(
            sigma_to,
            np.sqrt(sigma_to**2 * (sigma_from**2 - sigma_to**2) / sigma_from**2),
        )
        sigma_down = np.sqrt(sigma_to**2 - sigma_up**2)
        noise = np.random.default_rng(0).standard_normal(x.shape) * sigma_up
        assert np.allclose(out, x * (sigma_down / sigma_from) + noise, atol=1e-12)

    def test_fixed_seed_reproducible(self, rng):
        x = rng.standard_normal((4, 8, 8))
        denoised = 0.1 * rng.standard_normal((4, 8, 8))
        out_a = euler_ancestral_step(x, 1.0, 0.4, denoised, np.random.default_rng(9))
        out_b = euler_ancestral_step(x, 1.0, 0.4, denoised, np.random.default_rng(9))
        assert np.array_equal(out_a, out_b)

    def test_rejects_nonmonotone_sigmas(self, rng):
        x = rng.standard_normal((4, 8, 8))
        with pytest.raises(ValidationError):
            euler_ancestral_step(x, 0.5, 0.5, x, rng)


class TestEditImage:
    def test_switch_at_train_timesteps_equals_no_bank_run(self, backend, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        config = EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5)
        baseline = edit_image(backend, None, before, config)
        switched = edit_image(
            backend, shift_bank, before,
            EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5, switch_t=1000),
        )
        assert np.array_equal(baseline, switched)

    def test_switch_at_zero_equals_full_application(self, backend, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        full = edit_image(
            backend, shift_bank, before, EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5)
        )
        switched = edit_image(
            backend, shift_bank, before,
            EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5, switch_t=0),
        )
        assert np.array_equal(full, switched)

    def test_partial_switch_interpolates_between_regimes(self, backend, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        outputs = {}
        for switch_t in (1000, 500, 0):
            cfg = EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5, switch_t=switch_t)
            outputs[switch_t] = edit_image(backend, shift_bank, before, cfg)
        assert not np.array_equal(outputs[1000], outputs[500])
        assert not np.array_equal(outputs[500], outputs[0])

    def test_switch_threshold_gates_override_injection(self, backend, shift_bank, shift_suite):
        # blocks must be injected exactly at visited timesteps >= switch_t
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        seen = []
        original = backend.predict_noise

        def spy(state, cond):
            if cond.kv_overrides is not None:
                seen.append(state.timestep)
            return original(state, cond)

        backend.predict_noise = spy
        try:
            cfg = EditConfig(s_text=1.0, s_image=1.0, steps=12, seed=5, switch_t=500)
            edit_image(backend, shift_bank, before, cfg)
        finally:
            backend.predict_noise = original
        schedule = attach_timesteps(
            karras_schedule(12, backend.descriptor.sigma_min,
                            backend.descriptor.sigma_max, 7.0),
            backend,
        )
        expected = [int(t) for t in schedule.timesteps if t >= 500]
        assert seen == expected
        assert 0 < len(seen) < 12

    def test_learned_shift_moves_channel_zero_toward_target(self, backend, shift_bank, shift_suite):
        config = EditConfig(s_text=1.0, s_image=1.0, steps=20, seed=5)
        for before, after in shift_suite.datasets[0].load_test_pairs():
            baseline = edit_image(backend, None, before, config)
            edited = edit_image(backend, shift_bank, before, config)
            gap = after[:, :, 0].mean() - baseline[:, :, 0].mean()
            moved = edited[:, :, 0].mean() - baseline[:, :, 0].mean()
            assert moved / gap > 0.5

    def test_learned_shift_improves_psnr(self, backend, shift_bank, shift_suite):
        config = EditConfig(s_text=1.0, s_image=1.0, steps=20, seed=5)
        for before, after in shift_suite.datasets[0].load_test_pairs():
            baseline = edit_image(backend, None, before, config)
            edited = edit_image(backend, shift_bank, before, config)
            assert psnr(edited, after) >= psnr(baseline, after) + 3.0

    def test_same_seed_bitwise_identical(self, backend, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        config = EditConfig(steps=8, seed=21)
        out_a = edit_image(backend, shift_bank, before, config)
        out_b = edit_image(backend, shift_bank, before, config)
        assert np.array_equal(out_a, out_b)

    def test_untrained_bank_rejected(self, backend, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        bank = bank_init_from_text(backend, "add a red tint", 5)
        with pytest.raises(ValidationError):
            edit_image(backend, bank, before, EditConfig(steps=4))

    def test_backend_mismatch_rejected(self, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        other = create_toy_backend(123)
        with pytest.raises(ValidationError):
            edit_image(other, shift_bank, before, EditConfig(steps=4))

    def test_unconditional_branches_never_see_overrides(self, backend, shift_bank, shift_suite):
        before = shift_suite.datasets[0].load_test_pairs()[0][0]
        calls = []
        original = backend.predict_noise

        def spy(state, cond):
            calls.append(
                (
                    cond.kv_overrides is not None,
                    bool(np.any(cond.image_latent)),
                )
            )
            return original(state, cond)

        backend.predict_noise = spy
        try:
            edit_image(backend, shift_bank, before, EditConfig(steps=6, seed=0))
        finally:
            backend.predict_noise = original
        assert len(calls) == 18
        for has_override, has_image in calls:
            if has_override:
                assert has_image
        assert sum(1 for has_override, _ in calls if has_override) == 6

    def test_output_matches_input_resolution_and_range(self, backend, shift_bank, rng):
        from helpers import blocky_test_image

        img = blocky_test_image(rng, 48)
        out = edit_image(backend, shift_bank, img, EditConfig(steps=4, seed=0))
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEditConfig:
    def test_defaults(self):
        config = EditConfig()
        assert config.s_text == 7.5
        assert config.s_image == 1.5
        assert config.steps == 20
        assert config.rho == 7.0

    def test_resolved_pulls_backend_sigma_range(self, backend):
        resolved = EditConfig().resolved(backend)
        assert resolved.sigma_min == backend.descriptor.sigma_min
        assert resolved.sigma_max == backend.descriptor.sigma_max

    def test_invalid_rejected(self):
        with pytest.raises(ValidationError):
            EditConfig(steps=0)
        with pytest.raises(ValidationError):
            EditConfig(sigma_min=2.0, sigma_max=1.0)
