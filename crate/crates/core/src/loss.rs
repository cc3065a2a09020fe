//! Multitask detection loss: Smooth L1 box regression on positive cells,
//! focal loss on negative cells, ψ-weighted cross entropy on positive cells,
//! all normalised by the number of positives.

use serde::{Deserialize, Serialize};

use crate::assign::{AssignmentMaps, Label};
use crate::error::{check_dim, Error, Result};
use crate::nn::Real;
use crate::pyramid::HeadOutputs;

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the localization term.
    pub beta: f64,
    pub gamma: f64,
    pub alpha_t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.45,
            gamma: 2.0,
            alpha_t: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.gamma >= 0.0 && self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            return Err(Error::Config(format!("need beta > 0, gamma ≥ 0, 0 < alpha_t < 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_loc: f64,
    pub l_cls: f64,
    pub total: f64,
    pub n_pos: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic probability clamped into `[PROB_EPS, 1 − PROB_EPS]`, and whether
/// the clamp was active (in which case the derivative is zero).
#[inline]
fn prob(logit: f64) -> (f64, bool) {
    let p = sigmoid(logit);
    if p < PROB_EPS {
        (PROB_EPS, true)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, true)
    } else {
        (p, false)
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `−α_t (1 − p_t)^γ log p_t` with `p_t = p` for `y = 1` and `1 − p` for `y = 0`.
pub fn focal_term(p: f64, y: bool, gamma: f64, alpha_t: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if y { p } else { 1.0 - p };
    -alpha_t * (1.0 - pt).powf(gamma) * pt.ln()
}

/// `(β/N) Σ smooth_l1(pred − target)` over positive cells and all four
/// components. Returns zero value and gradient when `N = 0`.
pub fn loc_loss(pred: &[[f64; 4]], target: &[[f64; 4]], positive: &[bool], beta: f64) -> Result<(f64, Vec<[f64; 4]>)> {
    check_dim("loc_loss", "targets", pred.len(), target.len())?;
    check_dim("loc_loss", "mask", pred.len(), positive.len())?;
    let n = positive.iter().filter(|&&m| m).count();
    let mut grad = vec![[0.0; 4]; pred.len()];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let scale = beta / n as f64;
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if !positive[i] {
            continue;
        }
        for c in 0..4 {
            let d = pred[i][c] - target[i][c];
            sum += smooth_l1(d);
            grad[i][c] = scale * smooth_l1_grad(d);
        }
    }
    Ok((scale * sum, grad))
}

/// Classification loss over a flat list of cells.
///
/// Negative cells contribute `focal_term(p, 0)`, positive cells
/// `ψ · (−log p)`, ignored cells nothing; the sum is divided by
/// `max(N_pos, 1)`. Returns the value and the gradient w.r.t. each logit.
pub fn cls_loss(logits: &[f64], labels: &[Label], weights: &[f64], config: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_dim("cls_loss", "labels", logits.len(), labels.len())?;
    check_dim("cls_loss", "weights", logits.len(), weights.len())?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Positive).count();
    cls_loss_normalized(logits, labels, weights, config, n_pos.max(1) as f64)
}

fn cls_loss_normalized(
    logits: &[f64],
    labels: &[Label],
    weights: &[f64],
    config: &LossConfig,
    norm: f64,
) -> Result<(f64, Vec<f64>)> {
    let (gamma, alpha) = (config.gamma, config.alpha_t);
    let mut grad = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for i in 0..logits.len() {
        let (p, clamped) = prob(logits[i]);
        let dp = if clamped { 0.0 } else { p * (1.0 - p) };
        match labels[i] {
            Label::Ignored => {}
            Label::Positive => {
                let weight = weights[i];
                sum += -weight * p.ln();
                grad[i] = -weight / p * dp / norm;
            }
            Label::Negative => {
                sum += focal_term(p, false, gamma, alpha);
                // d/dp [−α p^γ log(1 − p)]
                let pg = if gamma == 0.0 { 1.0 } else { p.powf(gamma) };
                let dpg = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
                let dl_dp = -alpha * (dpg * (1.0 - p).ln() - pg / (1.0 - p));
                grad[i] = dl_dp * dp / norm;
            }
        }
    }
    Ok((sum / norm, grad))
}

/// Loss of a batch of head outputs against per-image assignments, and its
/// gradient w.r.t. every head output.
pub fn total_loss<T: Real>(
    heads: &HeadOutputs<T>,
    assignments: &[AssignmentMaps],
    config: &LossConfig,
) -> Result<(LossReport, HeadOutputs<T>)> {
    let k = heads.levels.len();
    let n = heads.levels.first().map(|l| l.cls.n()).unwrap_or(0);
    check_dim("total_loss", "batch", n, assignments.len())?;
    for a in assignments {
        check_dim("total_loss", "levels", k, a.levels.len())?;
    }

    // Flatten every (image, level, cell[, class]) into parallel lists.
    let mut logits = Vec::new();
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let mut cls_slots = Vec::new();
    let mut pred = Vec::new();
    let mut target = Vec::new();
    let mut positive = Vec::new();
    let mut reg_slots = Vec::new();

    for (l, out) in heads.levels.iter().enumerate() {
        let [_, nc, h, w] = out.cls.shape();
        check_dim("total_loss", "reg channels", 4, out.reg.c())?;
        for (b, maps) in assignments.iter().enumerate() {
            let lvl = &maps.levels[l];
            check_dim("total_loss", "level cells", lvl.grid.cells(), h * w)?;
            for cell in 0..h * w {
                let (y, x) = (cell / w, cell % w);
                let label = lvl.labels[cell];
                for c in 0..nc {
                    let (lab, wt) = match label {
                        Label::Positive if lvl.classes[cell] == c => (Label::Positive, lvl.weights[cell]),
                        Label::Positive => (Label::Negative, 0.0),
                        other => (other, 0.0),
                    };
                    logits.push(out.cls.at(b, c, y, x).to_f64().unwrap());
                    labels.push(lab);
                    weights.push(wt);
                    cls_slots.push((l, out.cls.index(b, c, y, x)));
                }
                if label == Label::Positive {
                    let mut v = [0.0; 4];
                    for (c, vc) in v.iter_mut().enumerate() {
                        *vc = out.reg.at(b, c, y, x).to_f64().unwrap();
                    }
                    pred.push(v);
                    target.push(lvl.targets[cell]);
                    positive.push(true);
                    reg_slots.push((l, b, y, x));
                }
            }
        }
    }

    let n_pos = positive.len();
    let (l_loc, g_loc) = loc_loss(&pred, &target, &positive, config.beta)?;
    let (l_cls, g_cls) = cls_loss_normalized(&logits, &labels, &weights, config, n_pos.max(1) as f64)?;

    let mut grads = heads.zeros_like();
    for (&(l, idx), &g) in cls_slots.iter().zip(&g_cls) {
        grads.levels[l].cls.data_mut()[idx] = T::of(g);
    }
    for (&(l, b, y, x), g) in reg_slots.iter().zip(&g_loc) {
        for (c, &gc) in g.iter().enumerate() {
            grads.levels[l].reg.set(b, c, y, x, T::of(gc));
        }
    }
    Ok((
        LossReport {
            l_loc,
            l_cls,
            total: l_loc + l_cls,
            n_pos,
        },
        grads,
    ))
}

/// Loss value only.
pub fn loss_value<T: Real>(heads: &HeadOutputs<T>, assignments: &[AssignmentMaps], config: &LossConfig) -> Result<f64> {
    Ok(total_loss(heads, assignments, config)?.0.total)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::assign::{assign, AssignConfig, GroundTruth, LevelGrid};
    use crate::codec::BBox;
    use crate::gradcheck::{check_all, FD_STEP};
    use crate::nn::Tensor;
    use crate::pyramid::LevelOutput;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn loc_loss_examples() {
        let (v, g) = loc_loss(&[[0.3, -0.2, 1.0, 0.0]], &[[0.3, -0.2, 1.0, 0.0]], &[true], 0.45).unwrap();
        assert_eq!(v, 0.0);
        assert!(g[0].iter().all(|&x| x == 0.0));
        let (v, _) = loc_loss(&[[1.0, 0.0, 0.0, 0.0]], &[[0.0; 4]], &[true], 0.45).unwrap();
        assert!((v - 0.225).abs() < 1e-15);
        let (v, g) = loc_loss(&[[5.0; 4]], &[[0.0; 4]], &[false], 0.45).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g[0], [0.0; 4]);
    }

    #[test]
    fn loc_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 12;
        let target: Vec<[f64; 4]> = (0..n).map(|_| [0.0; 4].map(|_: f64| rng.random_range(-1.0..1.0))).collect();
        // Keep residuals away from the |d| = 1 kink.
        let pred: Vec<[f64; 4]> = target
            .iter()
            .map(|t| t.map(|v| v + if rng.random_bool(0.5) { rng.random_range(0.05..0.9) } else { rng.random_range(1.1..3.0) }))
            .collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let (_, g) = loc_loss(&pred, &target, &mask, 0.45).unwrap();
        let mut flat: Vec<f64> = pred.iter().flatten().copied().collect();
        let gflat: Vec<f64> = g.iter().flatten().copied().collect();
        let rep = check_all(&mut flat, &gflat, FD_STEP, |v| {
            let p: Vec<[f64; 4]> = v.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
            loc_loss(&p, &target, &mask, 0.45).unwrap().0
        });
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn focal_term_examples() {
        assert!((focal_term(0.5, false, 2.0, 0.25) - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((focal_term(0.5, false, 2.0, 0.25) - 0.043322).abs() < 1e-6);
        assert!(focal_term(1.0 - 1e-12, true, 2.0, 0.25) < 1e-12);
        for &p in &[0.1, 0.4, 0.9] {
            assert!((focal_term(p, true, 0.0, 0.25) + 0.25 * p.ln()).abs() < 1e-15);
        }
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let v = focal_term(i as f64 / 100.0, true, 2.0, 0.25);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn cls_loss_examples() {
        let (v, _) = cls_loss(&[0.0], &[Label::Positive], &[1.0], &LossConfig::default()).unwrap();
        assert!((v - 0.693147).abs() < 1e-6);
        let cfg = LossConfig::default();
        let logits = [30.0, 30.0, -30.0, -30.0, 0.0];
        let labels = [Label::Positive, Label::Positive, Label::Negative, Label::Negative, Label::Ignored];
        let (v, g) = cls_loss(&logits, &labels, &[1.0, 0.7, 0.0, 0.0, 0.0], &cfg).unwrap();
        assert!(v < 1e-6, "{v}");
        assert_eq!(g[4], 0.0);
    }

    #[test]
    fn no_positives_normalizes_by_one() {
        let cfg = LossConfig::default();
        let (v, _) = cls_loss(&[0.0, 0.0], &[Label::Negative, Label::Negative], &[0.0, 0.0], &cfg).unwrap();
        assert!((v - 2.0 * focal_term(0.5, false, 2.0, 0.25)).abs() < 1e-15);
    }

    fn random_cells(seed: u64, n: usize) -> (Vec<f64>, Vec<Label>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<Label> = (0..n)
            .map(|_| match rng.random_range(0..3) {
                0 => Label::Positive,
                1 => Label::Negative,
                _ => Label::Ignored,
            })
            .collect();
        let weights = labels
            .iter()
            .map(|l| if *l == Label::Positive { rng.random_range(0.3..1.0) } else { 0.0 })
            .collect();
        (logits, labels, weights)
    }

    #[test]
    fn cls_loss_gradient_matches_finite_differences() {
        for seed in 0..5 {
            for gamma in [0.0, 1.0, 2.0, 2.5] {
                let cfg = LossConfig { gamma, ..LossConfig::default() };
                let (mut logits, labels, weights) = random_cells(seed, 40);
                let (_, g) = cls_loss(&logits, &labels, &weights, &cfg).unwrap();
                let rep = check_all(&mut logits, &g, FD_STEP, |v| cls_loss(v, &labels, &weights, &cfg).unwrap().0);
                assert!(rep.passes(1e-4), "seed {seed} gamma {gamma}: {rep:?}");
            }
        }
    }

    #[test]
    fn ignored_cells_have_zero_gradient() {
        let (logits, labels, weights) = random_cells(8, 60);
        let (_, g) = cls_loss(&logits, &labels, &weights, &LossConfig::default()).unwrap();
        for (l, gi) in labels.iter().zip(&g) {
            if *l == Label::Ignored {
                assert_eq!(*gi, 0.0);
            }
        }
    }

    #[test]
    fn psi_scaling_scales_positive_term() {
        let cfg = LossConfig::default();
        let (logits, labels, weights) = random_cells(4, 50);
        let (with, _) = cls_loss(&logits, &labels, &weights, &cfg).unwrap();
        let zero: Vec<f64> = weights.iter().map(|_| 0.0).collect();
        let (neg_only, _) = cls_loss(&logits, &labels, &zero, &cfg).unwrap();
        let scaled: Vec<f64> = weights.iter().map(|w| 3.0 * w).collect();
        let (with3, _) = cls_loss(&logits, &labels, &scaled, &cfg).unwrap();
        assert!(((with3 - neg_only) - 3.0 * (with - neg_only)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn cls_loss_permutation_invariant(seed in 0u64..1000, rot in 0usize..50) {
            let (logits, labels, weights) = random_cells(seed, 50);
            let (v, _) = cls_loss(&logits, &labels, &weights, &LossConfig::default()).unwrap();
            fn perm<X: Clone>(v: &[X], rot: usize) -> Vec<X> {
                let mut x = v.to_vec();
                x.rotate_left(rot);
                x.reverse();
                x
            }
            let (w, _) = cls_loss(&perm(&logits, rot), &perm(&labels, rot), &perm(&weights, rot), &LossConfig::default()).unwrap();
            prop_assert!((v - w).abs() < 1e-12);
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }

    #[test]
    fn total_loss_report_and_gradient() {
        let grids = [LevelGrid { stride: 4, size: 8 }, LevelGrid { stride: 8, size: 4 }];
        let gts = [
            GroundTruth::new(BBox::new(4.0, 6.0, 20.0, 19.0)),
            GroundTruth::new(BBox::new(8.0, 2.0, 30.0, 28.0)),
        ];
        let maps = assign(&gts, &grids, &AssignConfig::default()).unwrap();
        let maps2 = assign(&gts[..1], &grids, &AssignConfig::default()).unwrap();
        assert!(maps.num_positive() > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let heads = HeadOutputs {
            levels: grids
                .iter()
                .map(|g| LevelOutput {
                    cls: Tensor::from_fn([2, 1, g.size, g.size], |_| rng.random_range(-3.0..3.0)),
                    reg: Tensor::from_fn([2, 4, g.size, g.size], |_| rng.random_range(-2.0..2.0)),
                })
                .collect(),
        };
        let batch = [maps, maps2];
        let cfg = LossConfig::default();
        let (report, grads) = total_loss(&heads, &batch, &cfg).unwrap();
        assert_eq!(report.total, report.l_loc + report.l_cls);
        assert_eq!(report.n_pos, batch.iter().map(|m| m.num_positive()).sum::<usize>());

        let flat = |h: &HeadOutputs<f64>| -> Vec<f64> {
            h.levels.iter().flat_map(|l| l.cls.data().iter().chain(l.reg.data()).copied()).collect()
        };
        let unflat = |v: &[f64]| -> HeadOutputs<f64> {
            let mut out = heads.clone();
            let mut off = 0;
            for l in &mut out.levels {
                let n = l.cls.len();
                l.cls.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
                let n = l.reg.len();
                l.reg.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            out
        };
        let mut x = flat(&heads);
        let rep = check_all(&mut x, &flat(&grads), FD_STEP, |v| loss_value(&unflat(v), &batch, &cfg).unwrap());
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
