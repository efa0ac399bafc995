//! Architecture descriptors and parameter initialization.
//!
//! A descriptor is a `|`-separated chain, e.g.
//! `embed:100:16:frozen|conv:32:5|relu|avgpool|linear:2`. It fully
//! determines the network skeleton, so checkpoints embed it verbatim.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Embedding, Layer, Network};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { channels: usize, width: usize },
    Relu,
    AvgPool,
    Linear { out: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub vocab: usize,
    pub dim: usize,
    pub frozen: bool,
    pub layers: Vec<LayerSpec>,
}

fn bad(descriptor: &str, msg: impl Into<String>) -> Error {
    Error::BadDescriptor {
        descriptor: descriptor.to_string(),
        msg: msg.into(),
    }
}

fn parse_field(descriptor: &str, part: &str, field: &str) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| bad(descriptor, format!("bad number `{field}` in `{part}`")))?;
    if v == 0 {
        return Err(bad(descriptor, format!("zero size in `{part}`")));
    }
    Ok(v)
}

pub fn parse_descriptor(descriptor: &str) -> Result<ArchSpec> {
    let mut parts = descriptor.split('|');
    let embed = parts.next().filter(|p| !p.is_empty()).ok_or_else(|| bad(descriptor, "empty"))?;
    let ef: Vec<&str> = embed.split(':').collect();
    let spec_err = || bad(descriptor, "first stage must be `embed:V:D` or `embed:V:D:frozen`");
    if ef[0] != "embed" || ef.len() < 3 || ef.len() > 4 {
        return Err(spec_err());
    }
    let vocab = parse_field(descriptor, embed, ef[1])?;
    let dim = parse_field(descriptor, embed, ef[2])?;
    let frozen = match ef.get(3) {
        None => false,
        Some(&"frozen") => true,
        Some(_) => return Err(spec_err()),
    };

    let mut layers = Vec::new();
    for part in parts {
        let f: Vec<&str> = part.split(':').collect();
        let layer = match f[0] {
            "conv" if f.len() == 3 => LayerSpec::Conv {
                channels: parse_field(descriptor, part, f[1])?,
                width: parse_field(descriptor, part, f[2])?,
            },
            "relu" if f.len() == 1 => LayerSpec::Relu,
            "avgpool" if f.len() == 1 => LayerSpec::AvgPool,
            "linear" if f.len() == 2 => LayerSpec::Linear {
                out: parse_field(descriptor, part, f[1])?,
            },
            _ => return Err(bad(descriptor, format!("unknown stage `{part}`"))),
        };
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(bad(descriptor, "no layers after the embedding"));
    }
    let Some(LayerSpec::Linear { .. }) = layers.last() else {
        return Err(bad(descriptor, "last stage must be `linear:O`"));
    };
    Ok(ArchSpec {
        vocab,
        dim,
        frozen,
        layers,
    })
}

pub fn format_descriptor(spec: &ArchSpec) -> String {
    let mut s = format!("embed:{}:{}", spec.vocab, spec.dim);
    if spec.frozen {
        s.push_str(":frozen");
    }
    for l in &spec.layers {
        s.push('|');
        match l {
            LayerSpec::Conv { channels, width } => s.push_str(&format!("conv:{channels}:{width}")),
            LayerSpec::Relu => s.push_str("relu"),
            LayerSpec::AvgPool => s.push_str("avgpool"),
            LayerSpec::Linear { out } => s.push_str(&format!("linear:{out}")),
        }
    }
    s
}

/// Expands a named architecture for a concrete vocabulary size, or passes
/// a literal descriptor through.
pub fn resolve_arch(name: &str, vocab: usize, class_count: usize) -> Result<String> {
    let d = match name {
        "sst-word" => format!(
            "embed:{vocab}:300:frozen|conv:100:5|relu|avgpool|linear:{class_count}"
        ),
        "sst-char" => format!(
            "embed:{vocab}:150|conv:100:5|relu|avgpool|linear:{class_count}"
        ),
        "ag-char" => format!(
            "embed:{vocab}:150|conv:100:10|relu|avgpool|linear:100|relu|linear:100|relu|linear:{class_count}"
        ),
        custom if custom.contains('|') => custom.to_string(),
        other => return Err(Error::UnknownArch(other.to_string())),
    };
    // Validate and normalize.
    Ok(format_descriptor(&parse_descriptor(&d)?))
}

fn glorot<F: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Builds an initialized network from a descriptor. Conv and linear
/// weights are Glorot-uniform with zero bias; the embedding is uniform in
/// +-sqrt(3/D) so rows have roughly unit scale. Draw order is fixed
/// (embedding, then layers), so a seed pins every parameter.
pub fn build_network<F: Scalar>(descriptor: &str, class_count: usize, rng: &mut ChaCha8Rng) -> Result<Network<F>> {
    let spec = parse_descriptor(descriptor)?;
    let limit = (3.0 / spec.dim as f64).sqrt();
    let data: Vec<F> = (0..spec.vocab * spec.dim)
        .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    let table = Tensor::new(vec![spec.vocab, spec.dim], data)?;
    build_with_embedding(&spec, class_count, Embedding::new(table, !spec.frozen)?, rng)
}

/// Builds a network around a preloaded (frozen or trainable) embedding
/// matrix, checking it against the descriptor shape.
pub fn build_network_with_table<F: Scalar>(
    descriptor: &str,
    class_count: usize,
    table: Tensor<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Network<F>> {
    let spec = parse_descriptor(descriptor)?;
    if table.shape() != [spec.vocab, spec.dim] {
        return Err(Error::shape(
            "build_network_with_table",
            format!(
                "descriptor wants embedding [{}, {}], table is {:?}",
                spec.vocab,
                spec.dim,
                table.shape()
            ),
        ));
    }
    build_with_embedding(&spec, class_count, Embedding::new(table, !spec.frozen)?, rng)
}

fn build_with_embedding<F: Scalar>(
    spec: &ArchSpec,
    class_count: usize,
    embedding: Embedding<F>,
    rng: &mut ChaCha8Rng,
) -> Result<Network<F>> {
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut in_dim = spec.dim;
    for l in &spec.layers {
        match *l {
            LayerSpec::Conv { channels, width } => {
                let fan_in = width * in_dim;
                let fan_out = channels * width;
                layers.push(Layer::Conv1d {
                    weight: glorot(vec![channels, width, in_dim], fan_in, fan_out, rng),
                    bias: Tensor::zeros(vec![channels]),
                });
                in_dim = channels;
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::AvgPool => layers.push(Layer::AvgPool),
            LayerSpec::Linear { out } => {
                layers.push(Layer::Linear {
                    weight: glorot(vec![out, in_dim], in_dim, out, rng),
                    bias: Tensor::zeros(vec![out]),
                });
                in_dim = out;
            }
        }
    }
    if in_dim != class_count {
        return Err(Error::shape(
            "build_network",
            format!("final layer emits {in_dim} logits, expected {class_count} classes"),
        ));
    }
    Network::new(embedding, layers, class_count)
}

/// Reads the descriptor back off a built network.
pub fn describe_network<F: Scalar>(net: &Network<F>) -> String {
    let mut spec = ArchSpec {
        vocab: net.embedding.vocab_size(),
        dim: net.embedding.dim(),
        frozen: !net.embedding.trainable,
        layers: Vec::new(),
    };
    for l in &net.layers {
        spec.layers.push(match l {
            Layer::Conv1d { weight, .. } => LayerSpec::Conv {
                channels: weight.shape()[0],
                width: weight.shape()[1],
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::AvgPool => LayerSpec::AvgPool,
            Layer::Linear { weight, .. } => LayerSpec::Linear {
                out: weight.shape()[0],
            },
        });
    }
    format_descriptor(&spec)
}
