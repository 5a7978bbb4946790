//! Embedded oracle suite behind the `selftest` command.
//!
//! Each check compares library code against an independent computation:
//! finite differences for gradients, naive loops for attention, brute force
//! for AUC, an SVD for PCA. [`Perturbation`] swaps in a deliberately broken
//! op so the harness itself can be shown to report failures.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::pca_fit_project;
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, SublayerKind};
use crate::data::Normalization;
use crate::error::Result;
use crate::gradcheck::{check_gradients, weighted_sum, GradCheckConfig};
use crate::inverse_residual::{irb, IrbOptions, IrbParams};
use crate::metrics::{accuracy, binary_roc_auc, f1_score, per_class_prf, ConfusionMatrix};
use crate::model::Model;
use crate::params::{BoundParams, ParamStore};
use crate::patch_embedding::{patchify, unpatchify, TokenSequence};
use crate::tensor::Tensor;
use crate::training::{lr_schedule, TrainConfig};
use crate::window_attention::{
    attention_sublayer, layout, AttentionParams, AttentionSublayerParams, LayerNormParams, WindowSpec,
};

const GRAD_TOLERANCE: f64 = 1e-3;

/// Fault injected into the suite to confirm that it can fail.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Perturbation {
    #[default]
    None,
    /// GELU forward gains a `1e-2 * x` term that its backward ignores.
    GeluBackward,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

type Check = fn(Perturbation) -> std::result::Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("op gradients", op_gradients),
    ("model gradients", model_gradients),
    ("windowed vs global attention", windowed_vs_global),
    ("irb identity", irb_identity),
    ("layout round-trips", layout_round_trips),
    ("checkpoint round-trip", checkpoint_round_trip),
    ("metric oracles", metric_oracles),
    ("lr schedule", schedule),
    ("pca vs svd", pca_vs_svd),
];

/// Runs every check, catching panics so one broken check cannot hide others.
pub fn run(perturbation: Perturbation) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let outcome = panic::catch_unwind(AssertUnwindSafe(|| check(perturbation)))
                .unwrap_or_else(|_| Err("panicked".to_string()));
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult { name, passed, detail, elapsed: start.elapsed() }
        })
        .collect()
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for r in results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!(
            "{status}  {:<width$}  {:>7.2}s  {}\n",
            r.name,
            r.elapsed.as_secs_f64(),
            r.detail
        ));
    }
    let passed = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", results.len()));
    out
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn gelu(g: &mut Graph<f64>, x: Var, p: Perturbation) -> Result<Var> {
    let y = g.gelu(x);
    match p {
        Perturbation::None => Ok(y),
        Perturbation::GeluBackward => {
            // A constant copy of x contributes to the value but not the gradient.
            let detached = g.constant(g.value(x).clone());
            let leak = g.scale(detached, 1e-2);
            g.add(y, leak)
        }
    }
}

fn op_gradients(p: Perturbation) -> std::result::Result<String, String> {
    type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
    let cases: Vec<(&str, Vec<Tensor<f64>>, OpFn)> = vec![
        ("matmul", vec![random(&[2, 3, 4], 1, 1.0), random(&[2, 4, 5], 2, 1.0)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("softmax", vec![random(&[3, 5], 3, 2.0)], Box::new(|g, v| g.softmax(v[0], 1))),
        (
            "layer_norm",
            vec![random(&[4, 6], 4, 1.0), random(&[6], 5, 1.0), random(&[6], 6, 1.0)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("gelu", vec![random(&[10], 7, 3.0)], Box::new(move |g, v| gelu(g, v[0], p))),
        (
            "depthwise_conv2d",
            vec![random(&[2, 4, 3, 2], 8, 1.0), random(&[3, 3, 2], 9, 1.0)],
            Box::new(|g, v| g.depthwise_conv2d(v[0], v[1])),
        ),
        (
            "gather_rows",
            vec![random(&[4, 3], 10, 1.0)],
            Box::new(|g, v| g.gather_rows(v[0], 3, vec![2, 0, 2, 3, 1], &[5, 3])),
        ),
        ("mean_axis", vec![random(&[3, 4, 2], 11, 1.0)], Box::new(|g, v| g.mean_axis(v[0], 1))),
        (
            "concat_slice",
            vec![random(&[2, 3], 12, 1.0), random(&[2, 2], 13, 1.0)],
            Box::new(|g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                g.slice(c, 1, 1, 3)
            }),
        ),
    ];
    let mut worst = (0.0f64, "");
    for (name, inputs, f) in &cases {
        let report = check_gradients(inputs, GradCheckConfig::default(), |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, 42)
        })
        .map_err(|e| format!("{name}: {e}"))?;
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, name);
        }
        ensure(report.passes(GRAD_TOLERANCE), || format!("{name}: max rel err {:.3e}", report.max_rel_err))?;
    }
    let labels = [2usize, 0, 1];
    let ce = check_gradients(&[random(&[3, 4], 14, 2.0)], GradCheckConfig::default(), |g, v| {
        g.cross_entropy(v[0], &labels, None)
    })
    .map_err(|e| e.to_string())?;
    ensure(ce.passes(GRAD_TOLERANCE), || format!("cross_entropy: max rel err {:.3e}", ce.max_rel_err))?;
    Ok(format!("{} ops, worst {:.1e} ({})", cases.len() + 1, worst.0.max(ce.max_rel_err), worst.1))
}

fn model_gradients(_: Perturbation) -> std::result::Result<String, String> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::<f64>::new(cfg, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in model.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let images = random(&[2, 8, 8, 3], 5, 1.0);
    let labels = [0usize, 4];
    let params = model.params().tensors().to_vec();
    let report = check_gradients(&params, GradCheckConfig::default(), |g, vars| {
        let x = g.constant(images.clone());
        let bound = BoundParams::from_vars(vars.to_vec());
        let out = model.forward::<ChaCha8Rng>(g, &bound, x, None)?;
        g.cross_entropy(out.logits, &labels, None)
    })
    .map_err(|e| e.to_string())?;
    let worst = report.worst.as_ref().map(|w| names[w.input].as_str()).unwrap_or("-");
    ensure(report.passes(GRAD_TOLERANCE), || format!("max rel err {:.3e} in {worst}", report.max_rel_err))?;
    Ok(format!("{} scalars, worst {:.1e}", report.checked, report.max_rel_err))
}

fn windowed_vs_global(_: Perturbation) -> std::result::Result<String, String> {
    let (g_h, g_w, d, heads, eps) = (3, 3, 6, 2, 1e-5);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let norm = LayerNormParams::init(&mut store, "s.norm", d).map_err(|e| e.to_string())?;
    let attn = AttentionParams::init(&mut store, &mut rng, "s.attn", d).map_err(|e| e.to_string())?;
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        *t = random(t.shape(), 60 + i as u64, 0.8);
    }
    let z = random(&[2, g_h * g_w, d], 7, 1.0);
    let spec = WindowSpec::new(g_h, 0, g_h, g_w).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let x = g.constant(z.clone());
    let seq = TokenSequence { tokens: x, grid_h: g_h, grid_w: g_w, has_cls: false };
    let params = AttentionSublayerParams { norm: norm.bind(&bound), attn: attn.bind(&bound) };
    let y = attention_sublayer(&mut g, seq, &params, &spec, heads, eps).map_err(|e| e.to_string())?;

    let get = |name: &str| store.by_name(name).expect("registered").data().to_vec();
    let (gamma, beta) = (get("s.norm.gamma"), get("s.norm.beta"));
    let w: Vec<Vec<f64>> = ["w_q", "w_k", "w_v", "w_o"].iter().map(|n| get(&format!("s.attn.{n}"))).collect();
    let t = g_h * g_w;
    let dk = d / heads;
    let matvec = |x: &[f64], m: &[f64]| -> Vec<f64> { (0..d).map(|j| (0..d).map(|k| x[k] * m[k * d + j]).sum()).collect() };
    let mut worst = 0.0f64;
    for b in 0..2 {
        let rows: Vec<&[f64]> = (0..t).map(|i| &z.data()[(b * t + i) * d..(b * t + i + 1) * d]).collect();
        let normed: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mu = r.iter().sum::<f64>() / d as f64;
                let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / d as f64;
                (0..d).map(|j| (r[j] - mu) / (var + eps).sqrt() * gamma[j] + beta[j]).collect()
            })
            .collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|x| matvec(x, &w[0])).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|x| matvec(x, &w[1])).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|x| matvec(x, &w[2])).collect();
        for i in 0..t {
            let mut ctx = vec![0.0; d];
            for h in 0..heads {
                let s: Vec<f64> = (0..t)
                    .map(|j| (h * dk..(h + 1) * dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let total: f64 = e.iter().sum();
                for c in h * dk..(h + 1) * dk {
                    ctx[c] = (0..t).map(|j| e[j] / total * v[j][c]).sum();
                }
            }
            let out = matvec(&ctx, &w[3]);
            for j in 0..d {
                let got = g.value(y.tokens).data()[(b * t + i) * d + j];
                worst = worst.max((got - (rows[i][j] + out[j])).abs());
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs diff {worst:.3e}"))?;
    Ok(format!("max abs diff {worst:.1e}"))
}

fn irb_identity(_: Perturbation) -> std::result::Result<String, String> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = IrbParams::init(&mut store, &mut rng, "irb", 6, 2, 3).map_err(|e| e.to_string())?;
    for (i, t) in store.tensors_mut().iter_mut().enumerate() {
        *t = random(t.shape(), 80 + i as u64, 1.0);
    }
    for name in ["irb.project_w", "irb.project_b"] {
        store.by_name_mut(name).expect("registered").data_mut().fill(0.0);
    }
    let x = random(&[2, 17, 6], 9, 2.0);
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let xv = g.constant(x.clone());
    let seq = TokenSequence { tokens: xv, grid_h: 4, grid_w: 4, has_cls: true };
    let y = irb(&mut g, seq, &p.bind(&bound), IrbOptions::default()).map_err(|e| e.to_string())?;
    let exact = g.value(y.tokens).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(exact, || "output differs from input".into())?;
    Ok("bit-exact".into())
}

fn bit_equal(a: &Tensor<f64>, b: &Tensor<f64>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn layout_round_trips(_: Perturbation) -> std::result::Result<String, String> {
    let img = random(&[2, 12, 8, 3], 10, 1.0);
    let back = patchify(&img, 4).and_then(|p| unpatchify(&p, 12, 8, 4)).map_err(|e| e.to_string())?;
    ensure(bit_equal(&back, &img), || "patchify".into())?;
    for (i, &(m, s, h, w)) in [(2, 1, 4, 6), (3, 1, 6, 9), (4, 2, 8, 8)].iter().enumerate() {
        let spec = WindowSpec::new(m, s, h, w).map_err(|e| e.to_string())?;
        let x = random(&[2, h * w, 3], 11 + i as u64, 1.0);
        let p = layout::partition(&x, &spec).and_then(|p| layout::reverse(&p, &spec)).map_err(|e| e.to_string())?;
        ensure(bit_equal(&p, &x), || format!("partition {spec:?}"))?;
        let s = layout::shift(&x, &spec).and_then(|s| layout::unshift(&s, &spec)).map_err(|e| e.to_string())?;
        ensure(bit_equal(&s, &x), || format!("shift {spec:?}"))?;
    }
    Ok("patchify, partition, shift".into())
}

fn checkpoint_round_trip(_: Perturbation) -> std::result::Result<String, String> {
    let model = Model::<f64>::new(ModelConfig { sublayer: SublayerKind::Irb, ..ModelConfig::tiny() }, 12)
        .map_err(|e| e.to_string())?;
    let names = (0..5).map(|c| format!("c{c}")).collect();
    let ckpt = Checkpoint::new(model, names, Normalization::default());
    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::<f64>::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let same = ckpt.model.params().tensors().iter().zip(back.model.params().tensors()).all(|(a, b)| bit_equal(a, b));
    ensure(same, || "parameters differ".into())?;
    ensure(back.to_bytes().map_err(|e| e.to_string())? == bytes, || "re-encoding differs".into())?;
    Ok(format!("{} bytes", bytes.len()))
}

fn metric_oracles(_: Perturbation) -> std::result::Result<String, String> {
    let f1 = f1_score(0.9604, 0.9621);
    ensure((f1 - 0.9613).abs() <= 1e-4, || format!("f1 {f1}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8))).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let Some(auc) = binary_roc_auc(&scores, &pos) else { continue };
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        worst = worst.max((auc - wins / pairs).abs());
        done += 1;
    }
    ensure(worst <= 1e-12, || format!("roc auc off by {worst:.3e}"))?;
    let cm = ConfusionMatrix::from_counts(vec![vec![4, 1], vec![2, 3]]).map_err(|e| e.to_string())?;
    ensure(accuracy(&cm).map_err(|e| e.to_string())? == 70.0, || "accuracy".into())?;
    let m = per_class_prf(&cm, 0);
    ensure(m.precision == 4.0 / 6.0 && m.sensitivity == 4.0 / 5.0, || format!("{m:?}"))?;
    Ok(format!("f1 {f1:.4}, auc worst {worst:.1e}"))
}

fn schedule(_: Perturbation) -> std::result::Result<String, String> {
    let cfg = TrainConfig::default();
    let lr = [0, 20, 40].map(|e| lr_schedule(e, &cfg));
    ensure(lr == [1e-3, 8.5e-4, 7.225e-4], || format!("{lr:?}"))?;
    Ok(format!("{lr:?}"))
}

fn pca_vs_svd(_: Perturbation) -> std::result::Result<String, String> {
    let pts = vec![
        vec![1.0, 2.0, 0.0],
        vec![-1.0, 0.5, 1.0],
        vec![2.0, -1.0, 0.5],
        vec![0.0, 0.0, -2.0],
        vec![-2.0, 1.5, 0.5],
        vec![0.5, -2.0, 1.0],
    ];
    let r = pca_fit_project(&pts, &[0, 0, 1, 1, 2, 2], 2).map_err(|e| e.to_string())?;
    let n = pts.len();
    let mean: Vec<f64> = (0..3).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, 3, |i, j| pts[i][j] - mean[j]);
    let svd = x.clone().svd(false, true);
    let vt = svd.v_t.ok_or("svd failed")?;
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut worst = 0.0f64;
    for (c, &k) in order.iter().take(2).enumerate() {
        worst = worst.max((svd.singular_values[k].powi(2) / (n - 1) as f64 - r.explained_variance[c]).abs());
        let proj: Vec<f64> = (0..n).map(|i| (0..3).map(|j| x[(i, j)] * vt[(k, j)]).sum()).collect();
        let dev = |sign: f64| proj.iter().zip(&r.projected).map(|(a, p)| (a - sign * p[c]).abs()).fold(0.0, f64::max);
        worst = worst.max(dev(1.0).min(dev(-1.0)));
    }
    ensure(worst <= 1e-8, || format!("deviation {worst:.3e}"))?;
    Ok(format!("deviation {worst:.1e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let results = run(Perturbation::None);
        assert!(all_passed(&results), "{}", format_table(&results));
    }

    #[test]
    fn perturbed_op_is_reported() {
        let results = run(Perturbation::GeluBackward);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
        assert_eq!(failed, ["op gradients"]);
        assert!(results[0].detail.contains("gelu"), "{}", results[0].detail);
        assert!(format_table(&results).contains("FAIL"));
    }
}
