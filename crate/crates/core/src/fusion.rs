//! Fusion initialization: crossmodal collaboration attention followed by a
//! weighted sum of unimodal and attentive sequences.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Graph handles of every intermediate of the collaboration attention.
#[derive(Clone, Copy, Debug)]
pub struct CollabVars {
    pub m_ta: Var,
    pub m_at: Var,
    pub s_ta: Var,
    pub s_at: Var,
    pub o_ta: Var,
    pub o_at: Var,
    pub x_tp: Var,
    pub x_ap: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollabAttnOutput<T> {
    pub m_ta: Matrix<T>,
    pub m_at: Matrix<T>,
    pub s_ta: Matrix<T>,
    pub s_at: Matrix<T>,
    pub o_ta: Matrix<T>,
    pub o_at: Matrix<T>,
    /// Attentive text sequence `X_T′`.
    pub x_tp: Matrix<T>,
    /// Attentive audio sequence `X_A′`.
    pub x_ap: Matrix<T>,
}

/// M = X_T X_Aᵀ, S = softmax_rows(tanh M), O = S X_other, X′ = O ⊙ X.
pub fn collab_attention_graph<T: Scalar>(g: &mut Graph<'_, T>, x_t: Var, x_a: Var) -> Result<CollabVars> {
    if g.shape(x_t) != g.shape(x_a) {
        return Err(Error::shape(
            "collab_attention",
            format!("X_T {:?} vs X_A {:?}", g.shape(x_t), g.shape(x_a)),
        ));
    }
    let m_ta = g.matmul_t(x_t, x_a);
    let m_at = g.matmul_t(x_a, x_t);
    let th_ta = g.tanh(m_ta);
    let s_ta = g.row_softmax(th_ta);
    let th_at = g.tanh(m_at);
    let s_at = g.row_softmax(th_at);
    let o_ta = g.matmul(s_ta, x_a);
    let o_at = g.matmul(s_at, x_t);
    let x_tp = g.mul(o_ta, x_t);
    let x_ap = g.mul(o_at, x_a);
    Ok(CollabVars {
        m_ta,
        m_at,
        s_ta,
        s_at,
        o_ta,
        o_at,
        x_tp,
        x_ap,
    })
}

pub fn collab_attention<T: Scalar>(x_t: &Matrix<T>, x_a: &Matrix<T>) -> Result<CollabAttnOutput<T>> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = g.input(x_t.clone());
    let a = g.input(x_a.clone());
    let v = collab_attention_graph(&mut g, t, a)?;
    let get = |var| g.value(var).clone();
    Ok(CollabAttnOutput {
        m_ta: get(v.m_ta),
        m_at: get(v.m_at),
        s_ta: get(v.s_ta),
        s_at: get(v.s_at),
        o_ta: get(v.o_ta),
        o_at: get(v.o_at),
        x_tp: get(v.x_tp),
        x_ap: get(v.x_ap),
    })
}

/// Scalar weights per unimodal input and a `1 × d` bias per fusion stream.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub w_t: ParamId,
    pub w_ap: ParamId,
    pub w_tp: ParamId,
    pub w_a: ParamId,
    pub b_tap: ParamId,
    pub b_tpa: ParamId,
    pub d: usize,
}

impl FusionWeights {
    /// Weights start at 1 and biases at 0, so fusion begins as a plain sum.
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize) -> Self {
        FusionWeights {
            w_t: b.constant("w_t", 1, 1, 1.0),
            w_ap: b.constant("w_ap", 1, 1, 1.0),
            w_tp: b.constant("w_tp", 1, 1, 1.0),
            w_a: b.constant("w_a", 1, 1, 1.0),
            b_tap: b.constant("b_tap", 1, d, 0.0),
            b_tpa: b.constant("b_tpa", 1, d, 0.0),
            d,
        }
    }

    /// Returns `(X_TA′, X_T′A)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x_t: Var,
        x_a: Var,
        x_tp: Var,
        x_ap: Var,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x_t);
        for v in [x_a, x_tp, x_ap] {
            if g.shape(v) != shape {
                return Err(Error::shape("init_fusion", format!("{:?} vs {:?}", g.shape(v), shape)));
            }
        }
        if shape.1 != self.d {
            return Err(Error::shape(
                "init_fusion",
                format!("width {} vs bias width {}", shape.1, self.d),
            ));
        }
        let tap = self.weighted(g, x_t, self.w_t, x_ap, self.w_ap, self.b_tap);
        let tpa = self.weighted(g, x_tp, self.w_tp, x_a, self.w_a, self.b_tpa);
        Ok((tap, tpa))
    }

    fn weighted<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        wx: ParamId,
        y: Var,
        wy: ParamId,
        bias: ParamId,
    ) -> Var {
        let wx = g.param(wx);
        let wy = g.param(wy);
        let b = g.param(bias);
        let sx = g.scale_by(x, wx);
        let sy = g.scale_by(y, wy);
        let s = g.add(sx, sy);
        g.add_row(s, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionPair<T> {
    /// `X_TA′`
    pub x_tap: Matrix<T>,
    /// `X_T′A`
    pub x_tpa: Matrix<T>,
}

pub fn init_fusion<T: Scalar>(
    x_t: &Matrix<T>,
    x_a: &Matrix<T>,
    x_tp: &Matrix<T>,
    x_ap: &Matrix<T>,
    weights: &FusionWeights,
    store: &ParamStore<T>,
) -> Result<FusionPair<T>> {
    let mut g = Graph::new(store);
    let vars = [x_t, x_a, x_tp, x_ap].map(|m| g.input(m.clone()));
    let (tap, tpa) = weights.forward(&mut g, vars[0], vars[1], vars[2], vars[3])?;
    Ok(FusionPair {
        x_tap: g.value(tap).clone(),
        x_tpa: g.value(tpa).clone(),
    })
}
