use serde::{Deserialize, Serialize};

use super::params::{init_parameters, ParamGroup, ParamSet};
use super::NnError;
use crate::tensor::{conv3d_output_extent, Graph, Scalar, Tensor, Var};

/// Output width of the classification head.
pub const NUM_CLASSES: usize = 2;

const GN_GROUPS: usize = 4;

/// Residual 3D convolutional encoder without batch statistics.
///
/// Layout: a patchifying stem convolution, then one stage per entry of
/// `channels` (3x3x3 convolution, optionally strided, followed by an optional
/// single-convolution residual block), global average pooling and a linear
/// lift to `feature_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_extent: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub channels: Vec<usize>,
    pub downsample: Vec<bool>,
    pub residual: bool,
    /// Group normalization with 4 groups after every convolution.
    pub group_norm: bool,
    pub feature_dim: usize,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_extent: 32,
            stem_kernel: 4,
            stem_stride: 4,
            channels: vec![16, 32, 64],
            downsample: vec![true; 3],
            residual: true,
            group_norm: false,
            feature_dim: 512,
            embedding_dim: 128,
        }
    }
}

impl EncoderConfig {
    /// Spatial extent after the stem and every stage.
    pub fn extents(&self) -> Vec<usize> {
        let mut e = conv3d_output_extent(self.input_extent, self.stem_kernel, self.stem_stride, 0);
        let mut out = vec![e];
        for &down in &self.downsample {
            e = conv3d_output_extent(e, 3, if down { 2 } else { 1 }, 1);
            out.push(e);
        }
        out
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let err = |m: String| Err(NnError::Config(m));
        if self.channels.is_empty() {
            return err("at least one stage is required".into());
        }
        if self.channels.len() != self.downsample.len() {
            return err(format!(
                "{} channel entries but {} downsample flags",
                self.channels.len(),
                self.downsample.len()
            ));
        }
        if self.channels.contains(&0) || self.feature_dim == 0 || self.embedding_dim == 0 {
            return err("layer widths must be positive".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 || self.stem_kernel > self.input_extent {
            return err(format!(
                "stem kernel {} / stride {} invalid for extent {}",
                self.stem_kernel, self.stem_stride, self.input_extent
            ));
        }
        if self.group_norm {
            if let Some(c) = self.channels.iter().find(|&&c| c % GN_GROUPS != 0) {
                return err(format!("group norm needs channels divisible by {GN_GROUPS}, got {c}"));
            }
        }
        if self.extents().contains(&0) {
            return err("spatial extent collapses to zero".into());
        }
        Ok(())
    }
}

/// Graph handles for every parameter of a [`SupConNet`], in [`ParamSet`] order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `Enc` plus the contrastive head `Proj1` and the classification head `Proj2`.
#[derive(Clone, Debug)]
pub struct SupConNet {
    config: EncoderConfig,
    params: ParamSet,
}

impl SupConNet {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, NnError> {
        let params = init_parameters(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self, NnError> {
        let mut net = Self::new(config, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Records every parameter as a leaf; `trainable` decides which get gradients.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.cast(), trainable(p.group())))
            .collect();
        Bound { vars }
    }

    /// Wraps caller-created leaves, one per parameter in [`ParamSet`] order.
    pub fn bound_from(&self, vars: Vec<Var>) -> Result<Bound, NnError> {
        if vars.len() != self.params.len() {
            return Err(NnError::GradientCount {
                expected: self.params.len(),
                actual: vars.len(),
            });
        }
        Ok(Bound { vars })
    }

    fn var(&self, b: &Bound, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("parameter `{name}` missing"));
        b.vars[i]
    }

    fn conv_block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        name: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NnError> {
        let w = self.var(b, &format!("{name}.weight"));
        let bias = self.var(b, &format!("{name}.bias"));
        let mut y = g.conv3d(x, w, Some(bias), stride, padding)?;
        if self.config.group_norm {
            let gamma = self.var(b, &format!("{name}.gn.gamma"));
            let beta = self.var(b, &format!("{name}.gn.beta"));
            y = g.group_norm(y, gamma, beta, GN_GROUPS)?;
        }
        Ok(y)
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var, name: &str) -> Result<Var, NnError> {
        let w = self.var(b, &format!("{name}.weight"));
        let bias = self.var(b, &format!("{name}.bias"));
        let y = g.matmul(x, w)?;
        Ok(g.add(y, bias)?)
    }

    /// `Enc`: `[batch, 1, E, E, E] -> [batch, feature_dim]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, x: Var) -> Result<Var, NnError> {
        let e = self.config.input_extent;
        let shape = g.shape(x);
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [e, e, e] {
            return Err(NnError::InputExtent {
                extent: e,
                shape: shape.to_vec(),
            });
        }
        let stem = self.conv_block(g, b, x, "enc.stem", self.config.stem_stride, 0)?;
        let mut h = g.relu(stem);
        for (i, &down) in self.config.downsample.iter().enumerate() {
            let stage = format!("enc.stage{}", i + 1);
            let y = self.conv_block(g, b, h, &format!("{stage}.conv"), if down { 2 } else { 1 }, 1)?;
            h = g.relu(y);
            if self.config.residual {
                let r = self.conv_block(g, b, h, &format!("{stage}.res"), 1, 1)?;
                let sum = g.add(h, r)?;
                h = g.relu(sum);
            }
        }
        let pooled = g.global_avg_pool(h)?;
        self.linear(g, b, pooled, "enc.lift")
    }

    /// `Proj1` followed by row normalization: `[batch, feature_dim] -> [batch, embedding_dim]`.
    pub fn project_contrastive<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<Var, NnError> {
        let h = self.linear(g, b, features, "proj1.fc1")?;
        let h = g.relu(h);
        let z = self.linear(g, b, h, "proj1.fc2")?;
        Ok(g.l2_normalize(z)?)
    }

    /// `Proj2`: raw logits `[batch, 2]`.
    pub fn project_classify<T: Scalar>(&self, g: &mut Graph<T>, b: &Bound, features: Var) -> Result<Var, NnError> {
        self.linear(g, b, features, "proj2.fc")
    }

    fn frozen_forward(&self, volumes: Tensor<f32>) -> Result<(Graph<f32>, Bound, Var), NnError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let x = g.constant(volumes);
        let f = self.encode(&mut g, &b, x)?;
        Ok((g, b, f))
    }

    /// Encoder features without recording gradients.
    pub fn features(&self, volumes: Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let (g, _, f) = self.frozen_forward(volumes)?;
        Ok(g.value(f).clone())
    }

    /// Unit-norm contrastive embeddings without recording gradients.
    pub fn embed(&self, volumes: Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let (mut g, b, f) = self.frozen_forward(volumes)?;
        let z = self.project_contrastive(&mut g, &b, f)?;
        Ok(g.value(z).clone())
    }

    /// Classification logits without recording gradients.
    pub fn logits(&self, volumes: Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let (mut g, b, f) = self.frozen_forward(volumes)?;
        let y = self.project_classify(&mut g, &b, f)?;
        Ok(g.value(y).clone())
    }

    /// Classification logits from precomputed encoder features.
    pub fn logits_from_features(&self, features: Tensor<f32>) -> Result<Tensor<f32>, NnError> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, |_| false);
        let f = g.constant(features);
        let y = self.project_classify(&mut g, &b, f)?;
        Ok(g.value(y).clone())
    }
}

/// Softmax probability of the anomaly class for each row of `[n, 2]` logits.
pub fn anomaly_scores(logits: &Tensor<f32>) -> Vec<f64> {
    logits
        .data()
        .chunks(NUM_CLASSES)
        .map(|row| {
            let (a, b) = (row[0] as f64, row[1] as f64);
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}
