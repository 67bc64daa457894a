use proptest::prelude::*;
use rlrs_core::schedule::{lr_at, preset, ComponentTag, ModelKind, RelativeRate, RelativeRates, ScheduleSpec};
use rlrs_oracles::cosine_lr;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn cosine_quarter_points() {
    // 100 warmup steps then 400 cosine steps: quarter points land on whole steps.
    let spec = ScheduleSpec::new(3e-3, 0.04, 0.2, 500).unwrap();
    for kind in [ModelKind::Moe, ModelKind::Dense] {
        let rates = preset(kind);
        for (tag, r) in rates.iter() {
            let (peak, last) = (3e-3 * r.start, 3e-3 * 0.04 * r.end);
            for q in 0..=4u64 {
                let step = 100 + q * 100;
                let got = lr_at(&spec, &rates, tag, step).unwrap();
                let want = cosine_lr(peak, last, 100, 500, step);
                assert!(rel(got, want) < 1e-12, "{tag} at t'={}: {got} vs {want}", q as f64 / 4.0);
            }
        }
    }
}

#[test]
fn warmup_boundary_is_continuous() {
    let spec = ScheduleSpec::new(2e-3, 0.06, 0.01, 10_000).unwrap();
    let rates = preset(ModelKind::Dense);
    for (tag, r) in rates.iter() {
        let peak = 2e-3 * r.start;
        let w = spec.warmup_steps();
        let at_w = lr_at(&spec, &rates, tag, w).unwrap();
        // The linear ramp extended to step W reaches the peak exactly.
        let ramp_limit = peak * w as f64 / w as f64;
        assert!(rel(at_w, ramp_limit) < 1e-12);
        let before = lr_at(&spec, &rates, tag, w - 1).unwrap();
        assert!(rel(before, peak * (w - 1) as f64 / w as f64) < 1e-12);
    }
}

#[test]
fn zero_warmup_starts_at_peak() {
    let spec = ScheduleSpec::new(1e-3, 0.1, 0.0, 100).unwrap();
    let rates = RelativeRates::identity(ModelKind::Moe);
    assert_eq!(lr_at(&spec, &rates, ComponentTag::Router, 0).unwrap(), 1e-3);
    assert!(rel(lr_at(&spec, &rates, ComponentTag::Router, 100).unwrap(), 1e-4) < 1e-12);
}

#[test]
fn missing_component_and_bad_step() {
    let spec = ScheduleSpec::new(1e-3, 0.1, 0.0, 100).unwrap();
    let rates = preset(ModelKind::Dense);
    assert!(lr_at(&spec, &rates, ComponentTag::Router, 5).is_err());
    assert!(lr_at(&spec, &rates, ComponentTag::Attention, 101).is_err());
    assert!(ScheduleSpec::new(1e-3, 0.0, 0.0, 100).is_err());
    assert!(ScheduleSpec::new(1e-3, 0.1, 1.0, 100).is_err());
}

fn spec_strategy() -> impl Strategy<Value = ScheduleSpec> {
    (1e-5..1e-1f64, 0.01..1.0f64, 0.0..0.3f64, 20u64..5000)
        .prop_map(|(eta, alpha, wf, t)| ScheduleSpec { eta_base: eta, alpha_end: alpha, warmup_fraction: wf, total_steps: t })
        .prop_filter("cosine segment", |s| s.validate().is_ok())
}

fn rate_strategy() -> impl Strategy<Value = RelativeRate> {
    (0.05..10.0f64, 0.05..10.0f64).prop_map(|(s, e)| RelativeRate::new(s, e))
}

proptest! {
    #[test]
    fn endpoints_and_shape(spec in spec_strategy(), r in rate_strategy()) {
        let mut rates = RelativeRates::empty();
        rates.set(ComponentTag::Attention, r);
        let lr = |s| lr_at(&spec, &rates, ComponentTag::Attention, s).unwrap();
        let (w, t) = (spec.warmup_steps(), spec.total_steps);
        let (peak, last) = (spec.eta_base * r.start, spec.eta_base * spec.alpha_end * r.end);
        prop_assert!(rel(lr(w), peak) < 1e-12);
        prop_assert!(rel(lr(t), last) < 1e-12);
        let mut prev = lr(0);
        for s in 1..=t {
            let cur = lr(s);
            prop_assert!(cur >= 0.0);
            if s <= w {
                prop_assert!(cur >= prev);
            } else if peak >= last {
                prop_assert!(cur <= prev * (1.0 + 1e-15));
            }
            prev = cur;
        }
    }

    #[test]
    fn identity_is_the_base_schedule(spec in spec_strategy(), step_frac in 0.0..=1.0f64) {
        let step = (step_frac * spec.total_steps as f64) as u64;
        let id = RelativeRates::identity(ModelKind::Dense);
        let base = cosine_lr(spec.eta_base, spec.eta_base * spec.alpha_end, spec.warmup_steps(), spec.total_steps, step);
        for tag in ModelKind::Dense.components() {
            let got = lr_at(&spec, &id, *tag, step).unwrap();
            prop_assert!((got - base).abs() <= 1e-12 * base.abs().max(1e-300) + 1e-300);
        }
    }

    #[test]
    fn base_lr_and_rates_trade_off_exactly(spec in spec_strategy(), r in rate_strategy(), k in -4i32..=4, step_frac in 0.0..=1.0f64) {
        let c = 2f64.powi(k);
        let step = (step_frac * spec.total_steps as f64) as u64;
        let mut rates = RelativeRates::empty();
        rates.set(ComponentTag::Experts, r);
        let mut scaled_rates = RelativeRates::empty();
        scaled_rates.set(ComponentTag::Experts, RelativeRate::new(r.start / c, r.end / c));
        let scaled = ScheduleSpec { eta_base: spec.eta_base * c, ..spec };
        let a = lr_at(&spec, &rates, ComponentTag::Experts, step).unwrap();
        let b = lr_at(&scaled, &scaled_rates, ComponentTag::Experts, step).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }
}
