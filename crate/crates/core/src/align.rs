//! Crossmodal alignment: a valid-window temporal convolution per modality
//! brings both sequences to a shared `(l × d)`, followed by a bidirectional
//! GRU per modality.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `floor((len − kernel) / stride) + 1`, or `None` when the window does not fit.
pub fn out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// `conv.*` configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvConfig {
    pub kernel_text: usize,
    pub stride_text: usize,
    pub kernel_audio: usize,
    pub stride_audio: usize,
    pub out_channels: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            kernel_text: 1,
            stride_text: 1,
            kernel_audio: 30,
            stride_audio: 7,
            out_channels: 50,
        }
    }
}

impl ConvConfig {
    /// Shared aligned length for the given input lengths, or the reason there is none.
    pub fn aligned_len(&self, text_len: usize, audio_len: usize) -> Result<usize> {
        if self.kernel_text == 0 || self.stride_text == 0 || self.kernel_audio == 0 || self.stride_audio == 0 {
            return Err(Error::Config("conv kernels and strides must be at least 1".into()));
        }
        let t = out_len(text_len, self.kernel_text, self.stride_text).ok_or(Error::SequenceTooShort {
            len: text_len,
            kernel: self.kernel_text,
        })?;
        let a = out_len(audio_len, self.kernel_audio, self.stride_audio).ok_or(Error::SequenceTooShort {
            len: audio_len,
            kernel: self.kernel_audio,
        })?;
        if t != a {
            return Err(Error::AlignmentMismatch { text: t, audio: a });
        }
        Ok(t)
    }
}

/// `gru.*` configuration keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GruConfig {
    /// Stacked bidirectional layers per modality.
    pub depth: usize,
}

impl Default for GruConfig {
    fn default() -> Self {
        GruConfig { depth: 1 }
    }
}

/// Temporal convolution: each output step is an affine map of one flattened window.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    /// `(kernel · d_in) × d_out`, rows ordered window-step-major.
    pub weight: ParamId,
    /// `1 × d_out`
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl ConvLayer {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d_in: usize,
        d_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::Config(format!(
                "conv layer needs positive sizes (d_in {d_in}, d_out {d_out}, kernel {kernel}, stride {stride})"
            )));
        }
        let fan_in = kernel * d_in;
        Ok(ConvLayer {
            weight: b.uniform("weight", fan_in, d_out, fan_in),
            bias: b.uniform("bias", 1, d_out, fan_in),
            kernel,
            stride,
            d_in,
            d_out,
        })
    }

    pub fn out_len(&self, len: usize) -> Option<usize> {
        out_len(len, self.kernel, self.stride)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (len, width) = g.shape(x);
        if width != self.d_in {
            return Err(Error::shape(
                "conv_align",
                format!("input width {width}, expected {}", self.d_in),
            ));
        }
        if len < self.kernel {
            return Err(Error::SequenceTooShort {
                len,
                kernel: self.kernel,
            });
        }
        let windows = g.windows(x, self.kernel, self.stride);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(windows, w);
        Ok(g.add_row(y, b))
    }
}

/// Applies `layer` to `features` (`L × d_in`), giving `out_len × d_out`.
pub fn conv_align<T: Scalar>(features: &Matrix<T>, layer: &ConvLayer, store: &ParamStore<T>) -> Result<Matrix<T>> {
    let mut g = Graph::new(store);
    let x = g.input(features.clone());
    let y = layer.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// One GRU direction. Gate blocks are ordered `[reset | update | candidate]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    /// `d_in × 3h`
    pub w_input: ParamId,
    /// `h × 3h`
    pub w_hidden: ParamId,
    /// `1 × 3h`
    pub b_input: ParamId,
    /// `1 × 3h`
    pub b_hidden: ParamId,
    pub hidden: usize,
}

impl GruCell {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, prefix: &str, d_in: usize, hidden: usize) -> Self {
        GruCell {
            w_input: b.uniform(&format!("{prefix}.w_input"), d_in, 3 * hidden, d_in),
            w_hidden: b.uniform(&format!("{prefix}.w_hidden"), hidden, 3 * hidden, hidden),
            b_input: b.uniform(&format!("{prefix}.b_input"), 1, 3 * hidden, d_in),
            b_hidden: b.uniform(&format!("{prefix}.b_hidden"), 1, 3 * hidden, hidden),
            hidden,
        }
    }

    /// Runs the recurrence over `x` (`l × d_in`) in the given direction and
    /// returns the hidden states in time order.
    ///
    /// r = σ(x W_ir + b_ir + h W_hr + b_hr)
    /// z = σ(x W_iz + b_iz + h W_hz + b_hz)
    /// n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
    /// h' = (1 − z) ⊙ n + z ⊙ h
    fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, reverse: bool) -> Var {
        let l = g.shape(x).0;
        let h = self.hidden;
        let w_i = g.param(self.w_input);
        let b_i = g.param(self.b_input);
        let w_h = g.param(self.w_hidden);
        let b_h = g.param(self.b_hidden);
        let xw = g.matmul(x, w_i);
        let xi = g.add_row(xw, b_i);
        let mut state = g.input(Matrix::zeros(1, h));
        let mut outputs = vec![state; l];
        let steps: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..l).rev())
        } else {
            Box::new(0..l)
        };
        for t in steps {
            let xt = g.rows(xi, t, 1);
            let hw = g.matmul(state, w_h);
            let hh = g.add_row(hw, b_h);
            let (xr, xz, xn) = (g.cols(xt, 0, h), g.cols(xt, h, h), g.cols(xt, 2 * h, h));
            let (hr, hz, hn) = (g.cols(hh, 0, h), g.cols(hh, h, h), g.cols(hh, 2 * h, h));
            let r_pre = g.add(xr, hr);
            let r = g.sigmoid(r_pre);
            let z_pre = g.add(xz, hz);
            let z = g.sigmoid(z_pre);
            let gated = g.mul(r, hn);
            let n_pre = g.add(xn, gated);
            let n = g.tanh(n_pre);
            let one_minus_z = g.one_minus(z);
            let keep_new = g.mul(one_minus_z, n);
            let keep_old = g.mul(z, state);
            state = g.add(keep_new, keep_old);
            outputs[t] = state;
        }
        g.concat_rows(&outputs)
    }
}

/// Bidirectional GRU with `width / 2` hidden units per direction; outputs are
/// `[forward | backward]` per time step.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: GruCell,
    pub backward: GruCell,
    pub d_in: usize,
    pub width: usize,
}

impl BiGru {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, d_in: usize, width: usize) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "bidirectional GRU width {width} cannot be split evenly between two directions"
            )));
        }
        Ok(BiGru {
            forward: GruCell::build(b, "fwd", d_in, width / 2),
            backward: GruCell::build(b, "bwd", d_in, width / 2),
            d_in,
            width,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (l, w) = g.shape(x);
        if l == 0 {
            return Err(Error::shape("bigru_encode", "empty sequence"));
        }
        if w != self.d_in {
            return Err(Error::shape(
                "bigru_encode",
                format!("input width {w}, expected {}", self.d_in),
            ));
        }
        let f = self.forward.run(g, x, false);
        let b = self.backward.run(g, x, true);
        Ok(g.concat_cols(&[f, b]))
    }
}

pub fn bigru_encode<T: Scalar>(sequence: &Matrix<T>, gru: &BiGru, store: &ParamStore<T>) -> Result<Matrix<T>> {
    let mut g = Graph::new(store);
    let x = g.input(sequence.clone());
    let y = gru.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

/// Convolution followed by stacked bidirectional GRUs for one modality.
#[derive(Clone, Debug)]
pub struct AlignBranch {
    pub conv: ConvLayer,
    pub grus: Vec<BiGru>,
}

impl AlignBranch {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_in: usize,
        d: usize,
        kernel: usize,
        stride: usize,
        depth: usize,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("gru.depth must be at least 1".into()));
        }
        let conv = ConvLayer::build(&mut b.group(format!("align.{name}_conv")), d_in, d, kernel, stride)?;
        let grus = (0..depth)
            .map(|i| BiGru::build(&mut b.group(format!("align.{name}_gru{i}")), d, d))
            .collect::<Result<_>>()?;
        Ok(AlignBranch { conv, grus })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv.forward(g, x)?;
        for gru in &self.grus {
            h = gru.forward(g, h)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedPair<T> {
    pub x_t: Matrix<T>,
    pub x_a: Matrix<T>,
}

/// Separate text and audio branches sharing output width `d`.
#[derive(Clone, Debug)]
pub struct Aligner {
    pub text: AlignBranch,
    pub audio: AlignBranch,
    pub d: usize,
}

impl Aligner {
    pub fn build<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        d_text: usize,
        d_audio: usize,
        conv: &ConvConfig,
        gru: &GruConfig,
    ) -> Result<Self> {
        let d = conv.out_channels;
        Ok(Aligner {
            text: AlignBranch::build(b, "text", d_text, d, conv.kernel_text, conv.stride_text, gru.depth)?,
            audio: AlignBranch::build(b, "audio", d_audio, d, conv.kernel_audio, conv.stride_audio, gru.depth)?,
            d,
        })
    }

    /// Fails before any computation when the two branches would disagree on length.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, text: Var, audio: Var) -> Result<(Var, Var)> {
        let (lt, la) = (g.shape(text).0, g.shape(audio).0);
        let ot = self.text.conv.out_len(lt).ok_or(Error::SequenceTooShort {
            len: lt,
            kernel: self.text.conv.kernel,
        })?;
        let oa = self.audio.conv.out_len(la).ok_or(Error::SequenceTooShort {
            len: la,
            kernel: self.audio.conv.kernel,
        })?;
        if ot != oa {
            return Err(Error::AlignmentMismatch { text: ot, audio: oa });
        }
        let x_t = self.text.forward(g, text)?;
        let x_a = self.audio.forward(g, audio)?;
        Ok((x_t, x_a))
    }
}

pub fn align_pair<T: Scalar>(
    text: &Matrix<T>,
    audio: &Matrix<T>,
    aligner: &Aligner,
    store: &ParamStore<T>,
) -> Result<AlignedPair<T>> {
    let mut g = Graph::new(store);
    let t = g.input(text.clone());
    let a = g.input(audio.clone());
    let (x_t, x_a) = aligner.forward(&mut g, t, a)?;
    Ok(AlignedPair {
        x_t: g.value(x_t).clone(),
        x_a: g.value(x_a).clone(),
    })
}
