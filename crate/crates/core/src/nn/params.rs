use std::collections::HashMap;

use rand::Rng;

use super::model::{EncoderConfig, NUM_CLASSES};
use super::NnError;
use crate::seed;
use crate::tensor::Tensor;

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// `Enc`: the shared 3D convolutional trunk.
    Encoder,
    /// `Proj1`: contrastive projection head.
    Contrastive,
    /// `Proj2`: classification head.
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("proj1.") {
            Self::Contrastive
        } else if name.starts_with("proj2.") {
            Self::Classifier
        } else {
            Self::Encoder
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

impl Param {
    pub fn group(&self) -> ParamGroup {
        ParamGroup::of(&self.name)
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        let name = name.into();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.params[i].value)
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces values with those of `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::CheckpointMismatch(format!(
                "{} tensors in checkpoint, model has {}",
                other.len(),
                self.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(NnError::CheckpointMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}

fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Fan-in scaled uniform initialization (variance `2 / fan_in`) with zero biases.
pub fn init_parameters(config: &EncoderConfig, seed: u64) -> Result<ParamSet, NnError> {
    config.validate()?;
    let mut set = ParamSet::new();
    let conv = |set: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize| {
        let mut rng = seed::rng(seed::derive_str(seed, name));
        let fan_in = cin * k * k * k;
        set.push(format!("{name}.weight"), kaiming_uniform(vec![cout, cin, k, k, k], fan_in, &mut rng));
        set.push(format!("{name}.bias"), Tensor::zeros([cout]));
    };
    let gn = |set: &mut ParamSet, name: &str, c: usize| {
        set.push(format!("{name}.gamma"), Tensor::ones([c]));
        set.push(format!("{name}.beta"), Tensor::zeros([c]));
    };

    let c0 = config.channels[0];
    conv(&mut set, "enc.stem", c0, 1, config.stem_kernel);
    if config.group_norm {
        gn(&mut set, "enc.stem.gn", c0);
    }
    let mut cin = c0;
    for (i, &c) in config.channels.iter().enumerate() {
        let stage = format!("enc.stage{}", i + 1);
        conv(&mut set, &format!("{stage}.conv"), c, cin, 3);
        if config.group_norm {
            gn(&mut set, &format!("{stage}.conv.gn"), c);
        }
        if config.residual {
            conv(&mut set, &format!("{stage}.res"), c, c, 3);
            if config.group_norm {
                gn(&mut set, &format!("{stage}.res.gn"), c);
            }
        }
        cin = c;
    }

    let linear = |set: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize| {
        let mut rng = seed::rng(seed::derive_str(seed, name));
        set.push(format!("{name}.weight"), kaiming_uniform(vec![fan_in, fan_out], fan_in, &mut rng));
        set.push(format!("{name}.bias"), Tensor::zeros([fan_out]));
    };
    let f = config.feature_dim;
    linear(&mut set, "enc.lift", cin, f);
    linear(&mut set, "proj1.fc1", f, f);
    linear(&mut set, "proj1.fc2", f, config.embedding_dim);
    linear(&mut set, "proj2.fc", f, NUM_CLASSES);
    Ok(set)
}
