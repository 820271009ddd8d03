use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_SCHEMA_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "cpsf-model";

/// Network architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    /// Layer widths from input to output; tanh between layers, linear output.
    Mlp { sizes: Vec<usize> },
    /// Stacked LSTM layers followed by a linear head on the last hidden state.
    Lstm { input: usize, hidden: Vec<usize>, output: usize },
}

impl Topology {
    pub fn input_dim(&self) -> usize {
        match self {
            Topology::Mlp { sizes } => sizes[0],
            Topology::Lstm { input, .. } => *input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Topology::Mlp { sizes } => *sizes.last().expect("empty topology"),
            Topology::Lstm { output, .. } => *output,
        }
    }

    /// Name and shape of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        match self {
            Topology::Mlp { sizes } => {
                for (i, w) in sizes.windows(2).enumerate() {
                    out.push((format!("layer{i}.weight"), vec![w[1], w[0]]));
                    out.push((format!("layer{i}.bias"), vec![w[1]]));
                }
            }
            Topology::Lstm { input, hidden, output } => {
                let mut prev = *input;
                for (l, &h) in hidden.iter().enumerate() {
                    out.push((format!("lstm{l}.w_ih"), vec![4 * h, prev]));
                    out.push((format!("lstm{l}.w_hh"), vec![4 * h, h]));
                    out.push((format!("lstm{l}.bias"), vec![4 * h]));
                    prev = h;
                }
                out.push(("head.weight".into(), vec![*output, prev]));
                out.push(("head.bias".into(), vec![*output]));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Topology::Mlp { sizes } => sizes.len() >= 2 && sizes.iter().all(|&s| s > 0),
            Topology::Lstm { input, hidden, output } => {
                *input > 0 && *output > 0 && !hidden.is_empty() && hidden.iter().all(|&h| h > 0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("degenerate topology {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ModelParams<T> {
    pub topology: Topology,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(topology: &Topology) -> Self {
        let tensors = topology
            .layout()
            .into_iter()
            .map(|(name, shape)| NamedTensor { name, tensor: Tensor::zeros(shape) })
            .collect();
        ModelParams { topology: topology.clone(), tensors }
    }

    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.
    pub fn init(topology: &Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(topology);
        for named in &mut params.tensors {
            let shape = named.tensor.shape().to_vec();
            if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                for w in named.tensor.data_mut() {
                    *w = T::lit(rng.random_range(-limit..limit));
                }
            } else if named.name.starts_with("lstm") {
                let h = shape[0] / 4;
                for b in &mut named.tensor.data_mut()[h..2 * h] {
                    *b = T::one();
                }
            }
        }
        params
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.is_finite())
    }

    /// Checks tensor names and shapes against the topology.
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        let layout = self.topology.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), named) in layout.iter().zip(&self.tensors) {
            if *name != named.name || shape.as_slice() != named.tensor.shape() {
                return Err(Error::Shape { expected: shape.clone(), found: named.tensor.shape().to_vec() });
            }
            if named.tensor.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape { expected: shape.clone(), found: vec![named.tensor.len()] });
            }
        }
        Ok(())
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.tensor.data().iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            topology: self.topology.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: Tensor::from_vec(
                        t.tensor.shape().to_vec(),
                        t.tensor.data().iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
                    )
                    .expect("same shape"),
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    schema_version: u32,
    model: M,
}

/// Writes `model` as a versioned JSON container.
pub fn save_model<M: Serialize>(path: &Path, model: &M) -> Result<()> {
    let env = Envelope { format: MODEL_FORMAT.into(), schema_version: MODEL_SCHEMA_VERSION, model };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(path, e))?;
    }
    let text = serde_json::to_string(&env).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model<M: DeserializeOwned>(path: &Path) -> Result<M> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<M> = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if env.format != MODEL_FORMAT || env.schema_version != MODEL_SCHEMA_VERSION {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported model container {} v{}",
            path.display(),
            env.format,
            env.schema_version
        )));
    }
    Ok(env.model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lstm_layout_and_forget_bias() {
        let topo = Topology::Lstm { input: 3, hidden: vec![5], output: 2 };
        let p = ModelParams::<f64>::init(&topo, 0);
        let names: Vec<_> = p.tensors.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["lstm0.w_ih", "lstm0.w_hh", "lstm0.bias", "head.weight", "head.bias"]);
        assert_eq!(p.num_params(), 20 * 3 + 20 * 5 + 20 + 2 * 5 + 2);
        let bias = p.tensors[2].tensor.data();
        assert!(bias[..5].iter().all(|&b| b == 0.0));
        assert!(bias[5..10].iter().all(|&b| b == 1.0));
        p.validate().unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let topo = Topology::Mlp { sizes: vec![4, 8, 2] };
        assert_eq!(ModelParams::<f64>::init(&topo, 3), ModelParams::<f64>::init(&topo, 3));
        assert_ne!(ModelParams::<f64>::init(&topo, 3), ModelParams::<f64>::init(&topo, 4));
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let topo = Topology::Lstm { input: 4, hidden: vec![6, 3], output: 2 };
        let p = ModelParams::<f64>::init(&topo, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&path, &p).unwrap();
        let q: ModelParams<f64> = load_model(&path).unwrap();
        let a: Vec<u64> = p.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(p, q);
    }

    #[test]
    fn validate_rejects_wrong_shape() {
        let topo = Topology::Mlp { sizes: vec![2, 3] };
        let mut p = ModelParams::<f64>::zeros(&topo);
        p.tensors[0].tensor = Tensor::zeros(vec![2, 2]);
        assert!(matches!(p.validate(), Err(Error::Shape { .. })));
    }
}
