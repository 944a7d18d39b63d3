//! Segmentation objectives on the tape: binary cross-entropy, Dice, focal
//! loss, and their equal-weight combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Dice,
    BceDice,
    FocalDice,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::Bce),
            "dice" => Ok(Self::Dice),
            "bce_dice" => Ok(Self::BceDice),
            "focal_dice" => Ok(Self::FocalDice),
            other => Err(Error::InvalidConfig(format!("unknown loss kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    pub smooth: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::BceDice,
            smooth: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth > 0.0) {
            return Err(Error::InvalidConfig(format!("smooth must be > 0, got {}", self.smooth)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::InvalidConfig(format!("focal_gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("focal_alpha must lie in (0, 1), got {}", self.focal_alpha)));
        }
        Ok(())
    }

    /// Loss of `logits` (`B×H×W×classes`) against `target` (binary mask for a
    /// single class, one-hot otherwise).
    pub fn from_logits(&self, g: &mut Graph, logits: Var, target: Var, classes: usize) -> Result<Var> {
        let probs = probabilities(g, logits, classes);
        self.from_probs(g, probs, target, classes)
    }

    pub fn from_probs(&self, g: &mut Graph, probs: Var, target: Var, classes: usize) -> Result<Var> {
        let binary = classes == 1;
        let ce = |g: &mut Graph| {
            if binary {
                bce_loss(g, probs, target)
            } else {
                categorical_ce(g, probs, target)
            }
        };
        match self.kind {
            LossKind::Bce => ce(g),
            LossKind::Dice => dice_loss(g, probs, target, self.smooth),
            LossKind::BceDice => {
                let a = ce(g)?;
                let b = dice_loss(g, probs, target, self.smooth)?;
                half_sum(g, a, b)
            }
            LossKind::FocalDice => {
                let a = if binary {
                    focal_loss(g, probs, target, self.focal_gamma, self.focal_alpha)?
                } else {
                    categorical_focal(g, probs, target, self.focal_gamma, self.focal_alpha)?
                };
                let b = dice_loss(g, probs, target, self.smooth)?;
                half_sum(g, a, b)
            }
        }
    }
}

/// Sigmoid for a single class, softmax over the class axis otherwise.
pub fn probabilities(g: &mut Graph, logits: Var, classes: usize) -> Var {
    if classes == 1 {
        g.sigmoid(logits)
    } else {
        g.softmax(logits)
    }
}

fn same_shape(g: &Graph, probs: Var, target: Var, op: &'static str) -> Result<()> {
    if g.shape(probs) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op,
            expected: g.shape(probs).to_vec(),
            got: g.shape(target).to_vec(),
        });
    }
    Ok(())
}

fn half_sum(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

fn one_minus(g: &mut Graph, x: Var) -> Var {
    let n = g.neg(x);
    g.add_scalar(n, 1.0)
}

/// Mean of `-[t·ln p + (1-t)·ln(1-p)]` over all elements.
pub fn bce_loss(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    same_shape(g, probs, target, "bce_loss")?;
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = g.log(p);
    let q = one_minus(g, p);
    let lq = g.log(q);
    let t_comp = one_minus(g, target);
    let a = g.mul(target, lp)?;
    let b = g.mul(t_comp, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean_all(s);
    Ok(g.neg(m))
}

/// `1 - (2·Σp·t + s) / (Σp + Σt + s)`, computed per batch item and per class
/// (last axis), then averaged.
pub fn dice_loss(g: &mut Graph, probs: Var, target: Var, smooth: f64) -> Result<Var> {
    same_shape(g, probs, target, "dice_loss")?;
    let shape = g.shape(probs).to_vec();
    let b = shape[0];
    let k = *shape.last().unwrap_or(&1);
    let n = shape.iter().product::<usize>() / (b * k).max(1);
    let flat = [b, n, k];
    let p = g.reshape(probs, &flat)?;
    let t = g.reshape(target, &flat)?;
    let pt = g.mul(p, t)?;
    let inter = g.reduce_sum(pt, 1)?;
    let ps = g.reduce_sum(p, 1)?;
    let ts = g.reduce_sum(t, 1)?;
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(ps, ts)?;
    let den = g.add_scalar(den, smooth);
    let ratio = g.div(num, den)?;
    let m = g.mean_all(ratio);
    Ok(one_minus(g, m))
}

/// Equal-weight sum `0.5·bce + 0.5·dice`.
pub fn hybrid_loss(g: &mut Graph, probs: Var, target: Var, smooth: f64) -> Result<Var> {
    let a = bce_loss(g, probs, target)?;
    let b = dice_loss(g, probs, target, smooth)?;
    half_sum(g, a, b)
}

/// Mean of `-alpha·(1 - p_t)^gamma·ln p_t` with `p_t = p` on foreground and
/// `1 - p` on background.
pub fn focal_loss(g: &mut Graph, probs: Var, target: Var, gamma: f64, alpha: f64) -> Result<Var> {
    same_shape(g, probs, target, "focal_loss")?;
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = one_minus(g, p);
    let t_comp = one_minus(g, target);
    let a = g.mul(target, p)?;
    let b = g.mul(t_comp, q)?;
    let pt = g.add(a, b)?;
    let miss = one_minus(g, pt);
    let w = g.powf(miss, gamma);
    let lpt = g.log(pt);
    let term = g.mul(w, lpt)?;
    let m = g.mean_all(term);
    Ok(g.scale(m, -alpha))
}

/// Mean over pixels of `-Σ_k t_k·ln p_k`.
pub fn categorical_ce(g: &mut Graph, probs: Var, target: Var) -> Result<Var> {
    same_shape(g, probs, target, "categorical_ce")?;
    let k = *g.shape(probs).last().unwrap_or(&1);
    let p = g.clamp(probs, PROB_CLAMP, 1.0);
    let lp = g.log(p);
    let tl = g.mul(target, lp)?;
    let m = g.mean_all(tl);
    Ok(g.scale(m, -(k as f64)))
}

/// Mean over pixels of `-alpha·Σ_k t_k·(1 - p_k)^gamma·ln p_k`.
pub fn categorical_focal(g: &mut Graph, probs: Var, target: Var, gamma: f64, alpha: f64) -> Result<Var> {
    same_shape(g, probs, target, "categorical_focal")?;
    let k = *g.shape(probs).last().unwrap_or(&1);
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = one_minus(g, p);
    let w = g.powf(q, gamma);
    let lp = g.log(p);
    let wl = g.mul(w, lp)?;
    let term = g.mul(target, wl)?;
    let m = g.mean_all(term);
    Ok(g.scale(m, -alpha * k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(
        probs: &[f64],
        target: &[f64],
        shape: &[usize],
        f: impl Fn(&mut Graph, Var, Var) -> Result<Var>,
    ) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(shape, probs.to_vec()).unwrap());
        let t = g.constant(Tensor::new(shape, target.to_vec()).unwrap());
        let l = f(&mut g, p, t).unwrap();
        g.value(l).item()
    }

    #[test]
    fn bce_examples() {
        let t = [1.0, 0.0, 1.0, 1.0];
        let perfect = eval(&t, &t, &[1, 2, 2, 1], bce_loss);
        assert!((0.0..1e-6).contains(&perfect));
        let half = eval(&[0.5; 4], &t, &[1, 2, 2, 1], bce_loss);
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let v = eval(&[0.9, 0.2], &[1.0, 0.0], &[1, 1, 2, 1], bce_loss);
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((v - want).abs() < 1e-15);
        assert!((v - 0.164252).abs() < 1e-6);
    }

    #[test]
    fn bce_shape_mismatch() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let t = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        assert!(matches!(bce_loss(&mut g, p, t), Err(Error::ShapeMismatch { .. })));
        assert!(dice_loss(&mut g, p, t, 1.0).is_err());
    }

    #[test]
    fn dice_examples() {
        let t = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        for s in [0.5, 1.0, 3.0] {
            let v = eval(&t, &t, &[1, 2, 3, 1], |g, p, tt| dice_loss(g, p, tt, s));
            assert_eq!(v, 0.0);
        }
        let n = 6.0;
        let s = 1.0;
        let v = eval(&[0.0; 6], &[1.0; 6], &[1, 2, 3, 1], |g, p, tt| dice_loss(g, p, tt, s));
        assert!((v - (1.0 - s / (n + s))).abs() < 1e-15);
        let half: Vec<f64> = t.iter().map(|x| 0.5 * x).collect();
        let n = 3.0;
        let v = eval(&half, &t, &[1, 2, 3, 1], |g, p, tt| dice_loss(g, p, tt, s));
        assert!((v - (1.0 - (n + s) / (1.5 * n + s))).abs() < 1e-15);
    }

    #[test]
    fn dice_is_per_item_mean() {
        // item 0 perfect, item 1 all wrong
        let p = [1.0, 1.0, 0.0, 0.0];
        let t = [1.0, 1.0, 1.0, 1.0];
        let v = eval(&p, &t, &[2, 1, 2, 1], |g, pp, tt| dice_loss(g, pp, tt, 1.0));
        let item1 = 1.0 - 1.0 / 3.0;
        assert!((v - item1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn hybrid_examples() {
        let t = [1.0, 1.0, 0.0, 0.0];
        let perfect = eval(&t, &t, &[1, 2, 2, 1], |g, p, tt| hybrid_loss(g, p, tt, 1.0));
        assert!(perfect.abs() < 1e-6);
        let v = eval(&[0.5; 4], &t, &[1, 2, 2, 1], |g, p, tt| hybrid_loss(g, p, tt, 1.0));
        // N = 2 foreground pixels of 2N: dice = 1 - (2·0.5·N + 1)/(0.5·2N + N + 1)
        let dice = 1.0 - (1.0 * 2.0 + 1.0) / (2.0 + 2.0 + 1.0);
        assert!((v - (0.5 * std::f64::consts::LN_2 + 0.5 * dice)).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let p = [0.9, 0.3, 0.6, 0.05];
        let t = [1.0, 0.0, 0.0, 1.0];
        let f0 = eval(&p, &t, &[1, 2, 2, 1], |g, pp, tt| focal_loss(g, pp, tt, 0.0, 0.5));
        let b = eval(&p, &t, &[1, 2, 2, 1], bce_loss);
        assert!((f0 - 0.5 * b).abs() < 1e-15);
        let v = eval(&[0.9], &[1.0], &[1, 1, 1, 1], |g, pp, tt| focal_loss(g, pp, tt, 2.0, 0.25));
        let want = -0.25 * 0.01 * 0.9f64.ln();
        assert!((v - want).abs() < 1e-15);
        assert!((v - 2.6341e-4).abs() < 1e-8);
        let near = eval(&[1.0 - 1e-9], &[1.0], &[1, 1, 1, 1], |g, pp, tt| focal_loss(g, pp, tt, 2.0, 0.25));
        assert!(near.abs() < 1e-15);
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { smooth: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { focal_alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { focal_gamma: -1.0, ..Default::default() }.validate().is_err());
        assert_eq!("focal_dice".parse::<LossKind>().unwrap(), LossKind::FocalDice);
        assert!("l2".parse::<LossKind>().is_err());
    }

    #[test]
    fn categorical_ce_of_one_hot_prediction_is_zero() {
        let t = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let v = eval(&t, &t, &[1, 1, 2, 3], categorical_ce);
        assert!(v.abs() < 1e-12);
        let u = [1.0 / 3.0; 6];
        let v = eval(&u, &t, &[1, 1, 2, 3], categorical_ce);
        assert!((v - 3f64.ln()).abs() < 1e-12);
    }
}
