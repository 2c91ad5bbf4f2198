use coda::pipeline::experiments::{levels_sweep, pretrain};
use coda::pipeline::{QuantizerKind, RunConfig};

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.count = 64;
    cfg.data.eval_count = 32;
    cfg.pretrain.steps = 600;
    cfg.train.steps = 300;
    cfg.adapt.eval_every = 300;
    cfg
}

#[test]
fn residual_vq_error_falls_with_depth() {
    let mut cfg = small();
    cfg.quantizer.kind = QuantizerKind::RqVq;
    let (ae, _) = pretrain(&cfg).unwrap();
    let rows = levels_sweep(&cfg, &[1, 2, 3, 4, 5, 6], Some(&ae)).unwrap();
    let qe: Vec<f64> = rows.iter().map(|r| r.record.quant_err).collect();
    assert!(qe.windows(2).all(|w| w[1] <= w[0]), "{qe:?}");
    for r in &rows {
        let norms = &r.record.residual_norms;
        assert!(norms.windows(2).all(|w| w[1] <= w[0] + 1e-6), "{norms:?}");
    }
}

#[test]
fn levels_sweep_is_reproducible() {
    let cfg = small();
    let (ae, _) = pretrain(&cfg).unwrap();
    let a = levels_sweep(&cfg, &[1, 2], Some(&ae)).unwrap();
    let b = levels_sweep(&cfg, &[1, 2], Some(&ae)).unwrap();
    assert_eq!(a, b);
}
