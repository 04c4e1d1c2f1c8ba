//! Self-adjusting core: sinusoidal positions, embedding normalization,
//! crossmodal transformer blocks, and the two-stage adjustment stack that
//! re-injects unimodal streams into a fusion stream.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Scores divided by √(d / heads).
    #[default]
    PerHead,
    /// Scores divided by √d.
    FullDim,
}

/// `xadjust.*` configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XadjustConfig {
    pub blocks_per_stage: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub dropout: f64,
    pub scale_mode: ScaleMode,
}

impl Default for XadjustConfig {
    fn default() -> Self {
        XadjustConfig {
            blocks_per_stage: 5,
            heads: 5,
            ff_width: 200,
            dropout: 0.3,
            scale_mode: ScaleMode::PerHead,
        }
    }
}

impl XadjustConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.blocks_per_stage == 0 {
            return Err(Error::Config("xadjust.blocks_per_stage must be at least 1".into()));
        }
        validate_block_dims(d, self.heads, self.ff_width, self.dropout, "xadjust")
    }
}

pub(crate) fn validate_block_dims(d: usize, heads: usize, ff: usize, dropout: f64, key: &str) -> Result<()> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{key}: width {d} is not divisible by {heads} heads"
        )));
    }
    if ff == 0 {
        return Err(Error::Config(format!("{key}: feed-forward width must be positive")));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("{key}: dropout {dropout} outside [0, 1)")));
    }
    Ok(())
}

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(pos / 10000^(2i/d)).
pub fn positional_encoding<T: Scalar>(l: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(l, d, |pos, c| {
        let i2 = (c - c % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNormParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d: usize) -> Self {
        LayerNormParams {
            gain: b.constant(&format!("{name}.gain"), 1, d, 1.0),
            offset: b.constant(&format!("{name}.offset"), 1, d, 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let offset = g.param(self.offset);
        g.layer_norm(x, gain, offset)
    }
}

/// E = LN(PE + X)
pub fn embed_graph<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ln: &LayerNormParams) -> Var {
    let (l, d) = g.shape(x);
    let pe = g.input(positional_encoding(l, d));
    let s = g.add(pe, x);
    ln.forward(g, s)
}

pub fn embed<T: Scalar>(x: &Matrix<T>, ln: &LayerNormParams, store: &ParamStore<T>) -> Matrix<T> {
    let mut g = Graph::new(store);
    let v = g.input(x.clone());
    let e = embed_graph(&mut g, v, ln);
    g.value(e).clone()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: b.uniform(&format!("{name}.weight"), d_in, d_out, d_in),
            bias: b.uniform(&format!("{name}.bias"), 1, d_out, d_in),
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub scale_mode: ScaleMode,
}

impl MultiHeadAttention {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, heads: usize, scale_mode: ScaleMode) -> Self {
        MultiHeadAttention {
            query: Linear::build(b, "attn.query", d, d),
            key: Linear::build(b, "attn.key", d, d),
            value: Linear::build(b, "attn.value", d, d),
            output: Linear::build(b, "attn.output", d, d),
            heads,
            scale_mode,
        }
    }

    pub fn d(&self) -> usize {
        self.query.d_in
    }

    pub fn scale<T: Scalar>(&self) -> T {
        let d = self.d();
        let denom = match self.scale_mode {
            ScaleMode::PerHead => d / self.heads,
            ScaleMode::FullDim => d,
        };
        T::one() / T::of_usize(denom).sqrt()
    }

    /// `q` is `l × d`; `k` and `v` are `l_s × d`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, q: Var, k: Var, v: Var) -> Var {
        let d = self.d();
        let dh = d / self.heads;
        let scale = self.scale::<T>();
        let qp = self.query.forward(g, q);
        let kp = self.key.forward(g, k);
        let vp = self.value.forward(g, v);
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let qh = g.cols(qp, h * dh, dh);
                let kh = g.cols(kp, h * dh, dh);
                let vh = g.cols(vp, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scaled = g.scale(scores, scale);
                let attn = g.row_softmax(scaled);
                g.matmul(attn, vh)
            })
            .collect();
        let concat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        self.output.forward(g, concat)
    }
}

/// `d → ff → d` with the smooth rectifier and dropout on the hidden layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, d: usize, ff: usize, dropout: f64) -> Self {
        FeedForward {
            inner: Linear::build(b, "ff.inner", d, ff),
            outer: Linear::build(b, "ff.outer", ff, d),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.softplus(h);
        let h = g.dropout(h, self.dropout);
        self.outer.forward(g, h)
    }
}

/// Q = LN(target), K = V = LN(source),
/// M̂ = LN(MH(Q, K, V) + target), out = FF(LN(M̂)) + M̂.
#[derive(Clone, Debug)]
pub struct CrossmodalBlock {
    /// Applied to both the query input and the key/value source.
    pub ln_attn: LayerNormParams,
    pub attn: MultiHeadAttention,
    pub ln_residual: LayerNormParams,
    pub ln_ff: LayerNormParams,
    pub ff: FeedForward,
}

impl CrossmodalBlock {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d: usize,
        heads: usize,
        ff_width: usize,
        dropout: f64,
        scale_mode: ScaleMode,
    ) -> Result<Self> {
        validate_block_dims(d, heads, ff_width, dropout, b.group_name())?;
        Ok(CrossmodalBlock {
            ln_attn: LayerNormParams::build(b, "ln_attn", d),
            attn: MultiHeadAttention::build(b, d, heads, scale_mode),
            ln_residual: LayerNormParams::build(b, "ln_residual", d),
            ln_ff: LayerNormParams::build(b, "ln_ff", d),
            ff: FeedForward::build(b, d, ff_width, dropout),
        })
    }

    pub fn d(&self) -> usize {
        self.attn.d()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, target: Var, source: Var) -> Result<Var> {
        let d = self.d();
        let (tw, sw) = (g.shape(target).1, g.shape(source).1);
        if tw != d || sw != d {
            return Err(Error::shape(
                "crossmodal_block",
                format!("target width {tw}, source width {sw}, block width {d}"),
            ));
        }
        let q = self.ln_attn.forward(g, target);
        let kv = self.ln_attn.forward(g, source);
        let mh = self.attn.forward(g, q, kv, kv);
        let res = g.add(mh, target);
        let m_hat = self.ln_residual.forward(g, res);
        let f_in = self.ln_ff.forward(g, m_hat);
        let f = self.ff.forward(g, f_in);
        Ok(g.add(f, m_hat))
    }
}

pub fn crossmodal_block<T: Scalar>(
    target: &Matrix<T>,
    source: &Matrix<T>,
    block: &CrossmodalBlock,
    store: &ParamStore<T>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new(store);
    let t = g.input(target.clone());
    let s = g.input(source.clone());
    let y = block.forward(&mut g, t, s)?;
    Ok(g.value(y).clone())
}

/// Embeds a fusion stream and two key streams, then runs `N` blocks keyed on
/// the first key stream followed by `N` blocks keyed on the second.
#[derive(Clone, Debug)]
pub struct AdjustStack {
    pub embed_fusion: LayerNormParams,
    pub embed_first: LayerNormParams,
    pub embed_second: LayerNormParams,
    pub first_stage: Vec<CrossmodalBlock>,
    pub second_stage: Vec<CrossmodalBlock>,
}

impl AdjustStack {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, stream: &str, d: usize, cfg: &XadjustConfig) -> Result<Self> {
        cfg.validate(d)?;
        let mut eb = b.group(format!("{stream}.embed"));
        let embed_fusion = LayerNormParams::build(&mut eb, "fusion", d);
        let embed_first = LayerNormParams::build(&mut eb, "first", d);
        let embed_second = LayerNormParams::build(&mut eb, "second", d);
        let mut stage = |name: &str| -> Result<Vec<CrossmodalBlock>> {
            (0..cfg.blocks_per_stage)
                .map(|i| {
                    CrossmodalBlock::build(
                        &mut b.group(format!("{stream}.{name}.block{i}")),
                        d,
                        cfg.heads,
                        cfg.ff_width,
                        cfg.dropout,
                        cfg.scale_mode,
                    )
                })
                .collect()
        };
        let first_stage = stage("stage1")?;
        let second_stage = stage("stage2")?;
        Ok(AdjustStack {
            embed_fusion,
            embed_first,
            embed_second,
            first_stage,
            second_stage,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, fusion: Var, first: Var, second: Var) -> Result<Var> {
        let shape = g.shape(fusion);
        if g.shape(first) != shape || g.shape(second) != shape {
            return Err(Error::shape(
                "self_adjust",
                format!(
                    "fusion {:?}, keys {:?} and {:?}",
                    shape,
                    g.shape(first),
                    g.shape(second)
                ),
            ));
        }
        let e_fusion = embed_graph(g, fusion, &self.embed_fusion);
        let e_first = embed_graph(g, first, &self.embed_first);
        let e_second = embed_graph(g, second, &self.embed_second);
        let mut out = e_fusion;
        for block in &self.first_stage {
            out = block.forward(g, out, e_first)?;
        }
        for block in &self.second_stage {
            out = block.forward(g, out, e_second)?;
        }
        Ok(out)
    }
}

pub fn self_adjust<T: Scalar>(
    fusion: &Matrix<T>,
    first: &Matrix<T>,
    second: &Matrix<T>,
    stack: &AdjustStack,
    store: &ParamStore<T>,
) -> Result<Matrix<T>> {
    let mut g = Graph::new(store);
    let [f, a, b] = [fusion, first, second].map(|m| g.input(m.clone()));
    let y = stack.forward(&mut g, f, a, b)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn block(d: usize, heads: usize) -> (ParamStore<f64>, CrossmodalBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blk = CrossmodalBlock::build(
            &mut ParamBuilder::new(&mut store, &mut rng, "blk"),
            d,
            heads,
            12,
            0.3,
            ScaleMode::PerHead,
        )
        .unwrap();
        (store, blk)
    }

    #[test]
    fn pe_values() {
        let pe = positional_encoding::<f64>(4, 6);
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[(1, 0)] - 0.841471).abs() < 1e-6);
        assert!(pe.max_abs() <= 1.0);
        // column 2 uses 10000^(2/6)
        assert!((pe[(3, 2)] - (3.0 / 10000f64.powf(2.0 / 6.0)).sin()).abs() < 1e-15);
        assert!((pe[(3, 5)] - (3.0 / 10000f64.powf(4.0 / 6.0)).cos()).abs() < 1e-15);
    }

    #[test]
    fn embed_rows_are_normalized() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = LayerNormParams::build(&mut ParamBuilder::new(&mut store, &mut rng, "e"), "ln", 8);
        let x = random(5, 8, 3).map(|v| v * 4.0);
        let e = embed(&x, &ln, &store);
        for r in 0..5 {
            let mean = e.row(r).iter().sum::<f64>() / 8.0;
            let var = e.row(r).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        assert_eq!(e, embed(&x, &ln, &store));
    }

    #[test]
    fn block_shape_and_width_check() {
        let (store, blk) = block(8, 2);
        let y = crossmodal_block(&random(5, 8, 1), &random(3, 8, 2), &blk, &store).unwrap();
        assert_eq!(y.shape(), (5, 8));
        assert!(crossmodal_block(&random(5, 8, 1), &random(3, 6, 2), &blk, &store).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = CrossmodalBlock::build(
            &mut ParamBuilder::new(&mut store, &mut rng, "blk"),
            10,
            3,
            12,
            0.3,
            ScaleMode::PerHead,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn scale_modes() {
        let (_, blk) = block(8, 2);
        assert!((blk.attn.scale::<f64>() - 0.5).abs() < 1e-15);
        let mut full = blk.attn.clone();
        full.scale_mode = ScaleMode::FullDim;
        assert!((full.scale::<f64>() - 1.0 / 8f64.sqrt()).abs() < 1e-15);
    }
}
