//! The complete text-audio model: alignment, fusion initialization, two
//! self-adjusting streams and the prediction heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{Aligner, ConvConfig, GruConfig};
use crate::autograd::Graph;
use crate::data::{DatasetSplit, DEFAULT_AUDIO_DIM, DEFAULT_TEXT_DIM};
use crate::error::{Error, Result};
use crate::fusion::{collab_attention_graph, FusionWeights};
use crate::heads::{Heads, HeadsConfig, PredictionTriple, PredictionVars};
use crate::params::{GradBuffer, ParamBuilder, ParamSnapshot, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::xadjust::{AdjustStack, XadjustConfig};

/// `input.*` configuration keys: feature widths and the fixed sequence
/// lengths every record is zero-padded to before alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub d_text: usize,
    pub d_audio: usize,
    pub text_len: usize,
    pub audio_len: usize,
}

impl Default for InputConfig {
    fn default() -> Self {
        InputConfig {
            d_text: DEFAULT_TEXT_DIM,
            d_audio: DEFAULT_AUDIO_DIM,
            text_len: 50,
            audio_len: 375,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputConfig,
    pub conv: ConvConfig,
    pub gru: GruConfig,
    pub xadjust: XadjustConfig,
    pub heads: HeadsConfig,
}

impl ModelConfig {
    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            input: InputConfig {
                d_text: 3,
                d_audio: 2,
                text_len: 3,
                audio_len: 7,
            },
            conv: ConvConfig {
                kernel_text: 1,
                stride_text: 1,
                kernel_audio: 2,
                stride_audio: 2,
                out_channels: 4,
            },
            gru: GruConfig { depth: 1 },
            xadjust: XadjustConfig {
                blocks_per_stage: 1,
                heads: 2,
                ff_width: 6,
                ..Default::default()
            },
            heads: HeadsConfig {
                self_blocks: 1,
                hidden: 5,
                ..Default::default()
            },
        }
    }

    /// Shared aligned length `l`; fails on any inconsistent setting.
    pub fn validate(&self) -> Result<usize> {
        let i = &self.input;
        if i.d_text == 0 || i.d_audio == 0 {
            return Err(Error::Config("input feature widths must be positive".into()));
        }
        let l = self.conv.aligned_len(i.text_len, i.audio_len)?;
        let d = self.conv.out_channels;
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "conv.out_channels {d} must be even so the bidirectional GRU can split it"
            )));
        }
        if self.gru.depth == 0 {
            return Err(Error::Config("gru.depth must be at least 1".into()));
        }
        self.xadjust.validate(d)?;
        self.heads.validate()?;
        Ok(l)
    }

    pub fn width(&self) -> usize {
        self.conv.out_channels
    }
}

#[derive(Clone, Debug)]
struct Layout {
    aligner: Aligner,
    fusion: FusionWeights,
    adjust_tap: AdjustStack,
    adjust_tpa: AdjustStack,
    heads: Heads,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    aligned_len: usize,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    /// Builds and initialises every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let aligned_len = config.validate()?;
        let d = config.width();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng, "model");
        let aligner = Aligner::build(
            &mut b,
            config.input.d_text,
            config.input.d_audio,
            &config.conv,
            &config.gru,
        )?;
        let fusion = FusionWeights::build(&mut b.group("fusion.weights"), d);
        let adjust_tap = AdjustStack::build(&mut b, "adjust_tap", d, &config.xadjust)?;
        let adjust_tpa = AdjustStack::build(&mut b, "adjust_tpa", d, &config.xadjust)?;
        let heads = Heads::build(&mut b, d, &config.heads, &config.xadjust)?;
        Ok(Model {
            config,
            aligned_len,
            store,
            layout: Layout {
                aligner,
                fusion,
                adjust_tap,
                adjust_tpa,
                heads,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn aligned_len(&self) -> usize {
        self.aligned_len
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn aligner(&self) -> &Aligner {
        &self.layout.aligner
    }

    pub fn fusion(&self) -> &FusionWeights {
        &self.layout.fusion
    }

    /// `(TA′ stream, T′A stream)`
    pub fn adjust_stacks(&self) -> (&AdjustStack, &AdjustStack) {
        (&self.layout.adjust_tap, &self.layout.adjust_tpa)
    }

    pub fn heads(&self) -> &Heads {
        &self.layout.heads
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            aligned_len: self.aligned_len,
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Zero-pads a record's sequences to the configured input lengths.
    fn prepare(&self, text: &Matrix<f64>, audio: &Matrix<f64>) -> Result<(Matrix<T>, Matrix<T>)> {
        let i = &self.config.input;
        let fit = |m: &Matrix<f64>, len: usize, width: usize, what: &str| -> Result<Matrix<T>> {
            if m.cols() != width {
                return Err(Error::shape(
                    "model input",
                    format!("{what} width {} expected {width}", m.cols()),
                ));
            }
            if m.rows() > len || m.rows() == 0 {
                return Err(Error::Data(format!(
                    "{what} sequence of length {} does not fit the configured length {len}",
                    m.rows()
                )));
            }
            Ok(Matrix::from_fn(len, width, |r, c| {
                if r < m.rows() {
                    T::of(m[(r, c)])
                } else {
                    T::zero()
                }
            }))
        };
        Ok((
            fit(text, i.text_len, i.d_text, "text")?,
            fit(audio, i.audio_len, i.d_audio, "audio")?,
        ))
    }

    /// Records the full forward pass of one sample on `g`.
    pub fn forward(&self, g: &mut Graph<'_, T>, text: &Matrix<f64>, audio: &Matrix<f64>) -> Result<PredictionVars> {
        let (t, a) = self.prepare(text, audio)?;
        let t = g.input(t);
        let a = g.input(a);
        let (x_t, x_a) = self.layout.aligner.forward(g, t, a)?;
        let collab = collab_attention_graph(g, x_t, x_a)?;
        let (x_tap, x_tpa) = self.layout.fusion.forward(g, x_t, x_a, collab.x_tp, collab.x_ap)?;
        let adj_tap = self.layout.adjust_tap.forward(g, x_tap, x_t, collab.x_ap)?;
        let adj_tpa = self.layout.adjust_tpa.forward(g, x_tpa, collab.x_tp, x_a)?;
        self.layout.heads.forward(g, adj_tap, adj_tpa)
    }

    /// Evaluation-mode prediction for one sample.
    pub fn predict(&self, text: &Matrix<f64>, audio: &Matrix<f64>) -> Result<PredictionTriple<T>> {
        let mut g = Graph::new(&self.store);
        let p = self.forward(&mut g, text, audio)?;
        Ok(PredictionTriple {
            y_tap: g.scalar(p.y_tap),
            y_tpa: g.scalar(p.y_tpa),
            y_ta: g.scalar(p.y_ta),
        })
    }

    /// Global predictions for every record, in split order.
    pub fn predict_split(&self, split: &DatasetSplit) -> Result<Vec<f64>> {
        split
            .records
            .par_iter()
            .map(|r| self.predict(&r.text, &r.audio).map(|p| p.y_ta.as_f64()))
            .collect()
    }

    /// Joint loss of one sample (evaluation mode).
    pub fn sample_loss(&self, text: &Matrix<f64>, audio: &Matrix<f64>, label: f64) -> Result<T> {
        let mut g = Graph::new(&self.store);
        let p = self.forward(&mut g, text, audio)?;
        let l = self.layout.heads.loss(&mut g, p, T::of(label));
        Ok(g.scalar(l))
    }

    /// Joint loss of one sample and `scale ·` its parameter gradient. With
    /// `dropout` set the pass runs in training mode using that stream.
    pub fn sample_loss_grad(
        &self,
        text: &Matrix<f64>,
        audio: &Matrix<f64>,
        label: f64,
        scale: T,
        dropout: Option<ChaCha8Rng>,
    ) -> Result<(T, GradBuffer<T>)> {
        let mut g = match dropout {
            Some(rng) => Graph::training(&self.store, rng),
            None => Graph::new(&self.store),
        };
        let p = self.forward(&mut g, text, audio)?;
        let l = self.layout.heads.loss(&mut g, p, T::of(label));
        let mut grads = GradBuffer::zeros_like(&self.store);
        g.backward(l, scale, &mut grads);
        Ok((g.scalar(l), grads))
    }

    pub fn checkpoint(&self, epoch: usize) -> Checkpoint {
        Checkpoint {
            model: self.config.clone(),
            epoch,
            params: self.store.to_snapshot(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Self::new(ckpt.model.clone(), 0)?;
        m.store.load_snapshot(&ckpt.params)?;
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    /// Epoch (1-based) the parameters were taken from; 0 for an untrained model.
    pub epoch: usize,
    pub params: ParamSnapshot,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_consistent() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.validate().unwrap(), 50);
        assert_eq!(cfg.width(), 50);
    }

    #[test]
    fn tiny_model_predicts() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 1).unwrap();
        assert_eq!(m.aligned_len(), 3);
        let t = Matrix::filled(2, 3, 0.5);
        let a = Matrix::filled(7, 2, -0.5);
        let p = m.predict(&t, &a).unwrap();
        assert!(p.y_ta.is_finite() && p.y_tap.is_finite() && p.y_tpa.is_finite());
        assert!(m.predict(&Matrix::filled(4, 3, 0.0), &a).is_err());
        assert!(m.predict(&Matrix::filled(2, 2, 0.0), &a).is_err());
    }

    #[test]
    fn precision_cast_and_checkpoint() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        let m32: Model<f32> = Model::new(ModelConfig::tiny(), 4).unwrap();
        assert_eq!(m.cast::<f32>().params().to_snapshot(), m32.params().to_snapshot());
        let ck = m.checkpoint(0);
        let back = Model::<f64>::from_checkpoint(&ck).unwrap();
        assert_eq!(back.params().to_snapshot(), m.params().to_snapshot());
    }

    #[test]
    fn every_group_is_named() {
        let m = Model::<f64>::new(ModelConfig::tiny(), 0).unwrap();
        let groups = m.params().groups();
        for expected in [
            "align.text_conv",
            "align.text_gru0",
            "align.audio_conv",
            "align.audio_gru0",
            "fusion.weights",
            "adjust_tap.embed",
            "adjust_tap.stage1.block0",
            "adjust_tap.stage2.block0",
            "adjust_tpa.embed",
            "adjust_tpa.stage1.block0",
            "adjust_tpa.stage2.block0",
            "heads.self_tap.embed",
            "heads.self_tap.block0",
            "heads.self_tpa.embed",
            "heads.self_tpa.block0",
            "heads.local_tap",
            "heads.local_tpa",
            "heads.global",
        ] {
            assert!(groups.iter().any(|g| g == expected), "missing {expected} in {groups:?}");
        }
        assert_eq!(groups.len(), 18);
    }
}
