//! Self-attention transformers over the adjusted fusion streams, local and
//! global regressors, and the joint L1 objective.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::xadjust::{embed_graph, CrossmodalBlock, LayerNormParams, Linear, XadjustConfig};

/// `heads.*` configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub self_blocks: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Weights of the `(TA′, T′A, TA)` loss terms; ablation only.
    pub loss_weights: [f64; 3],
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig {
            self_blocks: 3,
            hidden: 200,
            dropout: 0.3,
            loss_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl HeadsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.self_blocks == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "heads.self_blocks and heads.hidden must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("heads.dropout {} outside [0, 1)", self.dropout)));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "heads.loss_weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Positional embedding followed by blocks whose source is their own input.
#[derive(Clone, Debug)]
pub struct SelfAttnTransformer {
    pub embed: LayerNormParams,
    pub blocks: Vec<CrossmodalBlock>,
}

impl SelfAttnTransformer {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d: usize,
        depth: usize,
        block_cfg: &XadjustConfig,
    ) -> Result<Self> {
        let embed = LayerNormParams::build(&mut b.group(format!("{name}.embed")), "ln", d);
        let blocks = (0..depth)
            .map(|i| {
                CrossmodalBlock::build(
                    &mut b.group(format!("{name}.block{i}")),
                    d,
                    block_cfg.heads,
                    block_cfg.ff_width,
                    block_cfg.dropout,
                    block_cfg.scale_mode,
                )
            })
            .collect::<Result<_>>()?;
        Ok(SelfAttnTransformer { embed, blocks })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = embed_graph(g, x, &self.embed);
        for block in &self.blocks {
            h = block.forward(g, h, h)?;
        }
        Ok(h)
    }
}

pub fn self_attn_transform<T: Scalar>(
    seq: &Matrix<T>,
    transformer: &SelfAttnTransformer,
    store: &ParamStore<T>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new(store);
    let x = g.input(seq.clone());
    let y = transformer.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// `affine(d_in → hidden) → softplus → dropout → affine(hidden → 1)`
#[derive(Clone, Debug)]
pub struct Regressor {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Regressor {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_in: usize, hidden: usize, dropout: f64) -> Self {
        Regressor {
            hidden: Linear::build(b, "hidden", d_in, hidden),
            out: Linear::build(b, "out", hidden, 1),
            dropout,
        }
    }

    /// `x` is `1 × d_in`; returns a 1×1 node.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.softplus(h);
        let h = g.dropout(h, self.dropout);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub y_tap: Var,
    pub y_tpa: Var,
    pub y_ta: Var,
}

/// Local predictions for each fusion stream and the global prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionTriple<T> {
    pub y_tap: T,
    pub y_tpa: T,
    /// Model output.
    pub y_ta: T,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub self_tap: SelfAttnTransformer,
    pub self_tpa: SelfAttnTransformer,
    pub local_tap: Regressor,
    pub local_tpa: Regressor,
    pub global: Regressor,
    pub loss_weights: [f64; 3],
}

impl Heads {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d: usize,
        cfg: &HeadsConfig,
        block_cfg: &XadjustConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Heads {
            self_tap: SelfAttnTransformer::build(b, "heads.self_tap", d, cfg.self_blocks, block_cfg)?,
            self_tpa: SelfAttnTransformer::build(b, "heads.self_tpa", d, cfg.self_blocks, block_cfg)?,
            local_tap: Regressor::build(&mut b.group("heads.local_tap"), d, cfg.hidden, cfg.dropout),
            local_tpa: Regressor::build(&mut b.group("heads.local_tpa"), d, cfg.hidden, cfg.dropout),
            global: Regressor::build(&mut b.group("heads.global"), 2 * d, cfg.hidden, cfg.dropout),
            loss_weights: cfg.loss_weights,
        })
    }

    /// Locals read the time-mean of each adjusted stream; the global head reads
    /// the concatenated final steps of both self-attention outputs.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, adj_tap: Var, adj_tpa: Var) -> Result<PredictionVars> {
        if g.shape(adj_tap) != g.shape(adj_tpa) {
            return Err(Error::shape(
                "predict",
                format!("{:?} vs {:?}", g.shape(adj_tap), g.shape(adj_tpa)),
            ));
        }
        let pooled_tap = g.mean_rows(adj_tap);
        let y_tap = self.local_tap.forward(g, pooled_tap);
        let pooled_tpa = g.mean_rows(adj_tpa);
        let y_tpa = self.local_tpa.forward(g, pooled_tpa);

        let s_tap = self.self_tap.forward(g, adj_tap)?;
        let s_tpa = self.self_tpa.forward(g, adj_tpa)?;
        let last = g.shape(s_tap).0 - 1;
        let last_tap = g.rows(s_tap, last, 1);
        let last_tpa = g.rows(s_tpa, last, 1);
        let summary = g.concat_cols(&[last_tap, last_tpa]);
        let y_ta = self.global.forward(g, summary);
        Ok(PredictionVars { y_tap, y_tpa, y_ta })
    }

    /// Weighted `|y_TA′ − y| + |y_T′A − y| + |y_TA − y|` for one sample.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<'_, T>, preds: PredictionVars, label: T) -> Var {
        joint_loss_graph(g, preds, label, self.loss_weights)
    }
}

pub fn joint_loss_graph<T: Scalar>(g: &mut Graph<'_, T>, preds: PredictionVars, label: T, weights: [f64; 3]) -> Var {
    let target = g.input(Matrix::scalar(label));
    let terms: Vec<Var> = [preds.y_tap, preds.y_tpa, preds.y_ta]
        .into_iter()
        .zip(weights)
        .map(|(p, w)| {
            let diff = g.sub(p, target);
            let a = g.abs(diff);
            if w == 1.0 {
                a
            } else {
                g.scale(a, T::of(w))
            }
        })
        .collect();
    let s = g.add(terms[0], terms[1]);
    g.add(s, terms[2])
}

pub fn predict<T: Scalar>(
    adj_tap: &Matrix<T>,
    adj_tpa: &Matrix<T>,
    heads: &Heads,
    store: &ParamStore<T>,
) -> Result<PredictionTriple<T>> {
    let mut g = Graph::new(store);
    let a = g.input(adj_tap.clone());
    let b = g.input(adj_tpa.clone());
    let p = heads.forward(&mut g, a, b)?;
    Ok(PredictionTriple {
        y_tap: g.scalar(p.y_tap),
        y_tpa: g.scalar(p.y_tpa),
        y_ta: g.scalar(p.y_ta),
    })
}

/// Unweighted joint L1 loss of one sample.
pub fn joint_loss<T: Scalar>(preds: &PredictionTriple<T>, label: T) -> T {
    (preds.y_tap - label).abs() + (preds.y_tpa - label).abs() + (preds.y_ta - label).abs()
}

/// Mean joint loss over a batch.
pub fn batch_joint_loss<T: Scalar>(preds: &[PredictionTriple<T>], labels: &[T]) -> Result<T> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::shape(
            "joint_loss",
            format!("{} predictions for {} labels", preds.len(), labels.len()),
        ));
    }
    let total: T = preds.iter().zip(labels).map(|(p, &y)| joint_loss(p, y)).sum();
    Ok(total / T::of_usize(preds.len()))
}
