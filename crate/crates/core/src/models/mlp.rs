use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of linear layers, including the output layer.
    pub depth: usize,
    pub num_classes: usize,
}

impl MlpConfig {
    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(
            self.hidden,
            self.depth.saturating_sub(1),
        ));
        dims.push(self.num_classes);
        dims
    }
}

/// Feed-forward classifier: relu hidden layers, one sigmoid per class.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpClassifier {
    pub config: MlpConfig,
    pub params: ParamStore,
}

impl MlpClassifier {
    pub fn new(config: MlpConfig, seed: u64) -> Result<Self> {
        if config.depth == 0 || config.input_dim == 0 || config.num_classes == 0 {
            return Err(Error::Config(format!("degenerate MLP {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (l, w) in config.dims().windows(2).enumerate() {
            params.insert_uniform(format!("layer{l}.weight"), &[w[0], w[1]], w[0], &mut rng);
            params.insert_uniform(format!("layer{l}.bias"), &[1, w[1]], w[0], &mut rng);
        }
        Ok(MlpClassifier { config, params })
    }

    /// Pre-sigmoid scores for a batch `x` of shape `[n, input_dim]`.
    pub fn logits(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let layers = params.len() / 2;
        let mut h = x.clone();
        for l in 0..layers {
            let bias = params[2 * l + 1].expand_axis(0, n)?;
            h = h.matmul(&params[2 * l])?.add(&bias)?;
            if l + 1 < layers {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
        self.logits(params, x)?.sigmoid()
    }

    /// Class probabilities without recording a tape.
    pub fn predict_probs(&self, x: &Array) -> Result<Array> {
        let p = self.params.constants();
        Ok(self
            .forward(&p, &Tensor::constant(x.clone()))?
            .value()
            .clone())
    }

    /// Argmax class per row.
    pub fn classify(&self, x: &Array) -> Result<Vec<usize>> {
        let probs = self.predict_probs(x)?;
        let (n, c) = probs.dims2("classify")?;
        Ok((0..n)
            .map(|i| argmax(&probs.data()[i * c..(i + 1) * c]))
            .collect())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
