//! On-disk network checkpoints.
//!
//! A checkpoint is a directory holding one tensor file per parameter array
//! and a text manifest `checkpoint.txt`:
//!
//! ```text
//! classes = 4
//! channels = 8
//! pooled = 4 4
//! iteration = 4000
//! normalizer.mean = 0 0 0 0
//! normalizer.stddev = 0.1 0.1 0.2 0.2
//! optimizer = momentum
//! layer = fc6 dense 256 128 1 2
//! layer = fc7 factored 256 256 64
//! layer = cls_score dense 5 256 1 2
//! layer = bbox_pred dense 16 256 1 2
//! ```
//!
//! Dense layers store `<name>.weights.bin` and `<name>.bias.bin`; factored
//! layers store `<name>.first.bin`, `<name>.second.bin` and `<name>.bias.bin`.
//! With `optimizer = momentum`, every dense layer also has
//! `<name>.weights.velocity.bin` and `<name>.bias.velocity.bin`. Values are
//! stored as `f32`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::geometry::TargetNormalizer;
use crate::net::{DetectionNet, FcGrads, FcLayer, Linear, NetGrads, SgdState, TrunkLayer};
use crate::svd::CompressedFcLayer;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "checkpoint.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: DetectionNet,
    pub normalizer: TargetNormalizer,
    /// Training iterations completed.
    pub iteration: usize,
    pub state: Option<SgdState>,
}

fn write_matrix(dir: &Path, file: &str, m: &Array2<f64>) -> Result<()> {
    let data: Vec<f64> = m.iter().copied().collect();
    Tensor::from_f64(vec![m.nrows(), m.ncols()], &data)?.write(&dir.join(file))
}

fn write_vector(dir: &Path, file: &str, v: &Array1<f64>) -> Result<()> {
    Tensor::from_f64(vec![v.len()], v.as_slice().expect("contiguous"))?.write(&dir.join(file))
}

fn read_matrix(dir: &Path, file: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let t = Tensor::read(&dir.join(file))?;
    if t.dims != [rows, cols] {
        return Err(Error::ShapeMismatch(format!(
            "{file}: expected {rows}x{cols}, found {:?}",
            t.dims
        )));
    }
    Ok(Array2::from_shape_vec((rows, cols), t.to_f64()).expect("checked shape"))
}

fn read_vector(dir: &Path, file: &str, len: usize) -> Result<Array1<f64>> {
    let t = Tensor::read(&dir.join(file))?;
    if t.dims != [len] {
        return Err(Error::ShapeMismatch(format!(
            "{file}: expected {len}, found {:?}",
            t.dims
        )));
    }
    Ok(Array1::from(t.to_f64()))
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

impl Checkpoint {
    pub fn manifest(&self) -> String {
        let net = &self.net;
        let mut out = String::new();
        let _ = writeln!(out, "classes = {}", net.num_classes);
        let _ = writeln!(out, "channels = {}", net.channels);
        let _ = writeln!(out, "pooled = {} {}", net.pooled_h, net.pooled_w);
        let _ = writeln!(out, "iteration = {}", self.iteration);
        let _ = writeln!(out, "normalizer.mean = {}", join(&self.normalizer.mean));
        let _ = writeln!(out, "normalizer.stddev = {}", join(&self.normalizer.stddev));
        let optimizer = if self.state.is_some() {
            "momentum"
        } else {
            "none"
        };
        let _ = writeln!(out, "optimizer = {optimizer}");
        let dense_line = |name: &str, l: &FcLayer| {
            format!(
                "layer = {name} dense {} {} {} {}\n",
                l.out_dim(),
                l.in_dim(),
                l.weight_lr_mult,
                l.bias_lr_mult
            )
        };
        for layer in &self.net.trunk {
            let name = &layer.name;
            match &layer.op {
                Linear::Dense(l) => out.push_str(&dense_line(name, l)),
                Linear::Factored(f) => {
                    let _ = writeln!(
                        out,
                        "layer = {name} factored {} {} {}",
                        f.out_dim(),
                        f.in_dim(),
                        f.rank()
                    );
                }
            }
        }
        out.push_str(&dense_line("cls_score", &net.cls));
        out.push_str(&dense_line("bbox_pred", &net.bbox));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let velocities = self.state.as_ref().map(|s| &s.velocity);
        let mut dense: Vec<(String, &FcLayer, Option<&FcGrads>)> = Vec::new();
        for (i, layer) in self.net.trunk.iter().enumerate() {
            match &layer.op {
                Linear::Dense(l) => {
                    dense.push((layer.name.clone(), l, velocities.map(|v| &v.trunk[i])))
                }
                Linear::Factored(f) => {
                    if velocities.is_some() {
                        return Err(Error::Config(format!(
                            "layer {} is compressed; optimizer state cannot be saved",
                            layer.name
                        )));
                    }
                    write_matrix(dir, &format!("{}.first.bin", layer.name), &f.first)?;
                    write_matrix(dir, &format!("{}.second.bin", layer.name), &f.second)?;
                    write_vector(dir, &format!("{}.bias.bin", layer.name), &f.bias)?;
                }
            }
        }
        dense.push((
            "cls_score".into(),
            &self.net.cls,
            velocities.map(|v| &v.cls),
        ));
        dense.push((
            "bbox_pred".into(),
            &self.net.bbox,
            velocities.map(|v| &v.bbox),
        ));
        for (name, l, vel) in dense {
            write_matrix(dir, &format!("{name}.weights.bin"), &l.weights)?;
            write_vector(dir, &format!("{name}.bias.bin"), &l.bias)?;
            if let Some(v) = vel {
                write_matrix(dir, &format!("{name}.weights.velocity.bin"), &v.weights)?;
                write_vector(dir, &format!("{name}.bias.velocity.bin"), &v.bias)?;
            }
        }
        let path = dir.join(MANIFEST_NAME);
        std::fs::write(&path, self.manifest()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let source_name = path.display().to_string();
        let parse_err = |line: usize, message: String| Error::Parse {
            source_name: source_name.clone(),
            line,
            message,
        };

        let mut classes = None;
        let mut channels = None;
        let mut pooled = None;
        let mut iteration = 0;
        let mut mean = None;
        let mut stddev = None;
        let mut momentum = false;
        let mut layers: Vec<(usize, Vec<String>)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err(line_no, "expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let nums = |n: usize| -> Result<Vec<f64>> {
                let v = value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(line_no, format!("{key}: {e}")))?;
                if v.len() != n {
                    return Err(parse_err(line_no, format!("{key}: expected {n} values")));
                }
                Ok(v)
            };
            let count = |v: f64| -> Result<usize> {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(parse_err(
                        line_no,
                        format!("{key}: expected a count, got {v}"),
                    ))
                }
            };
            match key {
                "classes" => classes = Some(count(nums(1)?[0])?),
                "channels" => channels = Some(count(nums(1)?[0])?),
                "pooled" => {
                    let v = nums(2)?;
                    pooled = Some((count(v[0])?, count(v[1])?));
                }
                "iteration" => iteration = count(nums(1)?[0])?,
                "normalizer.mean" => mean = Some(nums(4)?),
                "normalizer.stddev" => stddev = Some(nums(4)?),
                "optimizer" => {
                    momentum = match value {
                        "momentum" => true,
                        "none" => false,
                        other => {
                            return Err(parse_err(line_no, format!("unknown optimizer `{other}`")))
                        }
                    }
                }
                "layer" => layers.push((
                    line_no,
                    value.split_whitespace().map(str::to_string).collect(),
                )),
                other => return Err(parse_err(line_no, format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| parse_err(0, format!("missing `{what}`"));
        let num_classes = classes.ok_or_else(|| missing("classes"))?;
        let channels = channels.ok_or_else(|| missing("channels"))?;
        let (pooled_h, pooled_w) = pooled.ok_or_else(|| missing("pooled"))?;
        let mean = mean.ok_or_else(|| missing("normalizer.mean"))?;
        let stddev = stddev.ok_or_else(|| missing("normalizer.stddev"))?;

        let mut trunk = Vec::new();
        let mut trunk_vel = Vec::new();
        let mut heads: Vec<(FcLayer, Option<FcGrads>)> = Vec::new();
        let n_layers = layers.len();
        for (pos, (line_no, fields)) in layers.into_iter().enumerate() {
            let is_head = pos + 2 >= n_layers;
            let dims = |i: usize| -> Result<usize> {
                fields
                    .get(i)
                    .and_then(|t| t.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(line_no, format!("bad layer field {i}")))
            };
            let name = fields
                .first()
                .ok_or_else(|| parse_err(line_no, "empty layer line".into()))?
                .clone();
            match fields.get(1).map(String::as_str) {
                Some("dense") if fields.len() == 6 => {
                    let (out_dim, in_dim) = (dims(2)?, dims(3)?);
                    let mult = |i: usize| -> Result<f64> {
                        fields[i]
                            .parse::<f64>()
                            .map_err(|e| parse_err(line_no, format!("lr multiplier: {e}")))
                    };
                    let mut layer = FcLayer::new(
                        read_matrix(dir, &format!("{name}.weights.bin"), out_dim, in_dim)?,
                        read_vector(dir, &format!("{name}.bias.bin"), out_dim)?,
                    )?;
                    layer.weight_lr_mult = mult(4)?;
                    layer.bias_lr_mult = mult(5)?;
                    let vel = if momentum {
                        Some(FcGrads {
                            weights: read_matrix(
                                dir,
                                &format!("{name}.weights.velocity.bin"),
                                out_dim,
                                in_dim,
                            )?,
                            bias: read_vector(dir, &format!("{name}.bias.velocity.bin"), out_dim)?,
                        })
                    } else {
                        None
                    };
                    if is_head {
                        heads.push((layer, vel));
                    } else {
                        trunk.push(TrunkLayer {
                            name,
                            op: Linear::Dense(layer),
                        });
                        trunk_vel.push(vel);
                    }
                }
                Some("factored") if fields.len() == 5 && !is_head => {
                    if momentum {
                        return Err(parse_err(
                            line_no,
                            "factored layers carry no optimizer state".into(),
                        ));
                    }
                    let (out_dim, in_dim, rank) = (dims(2)?, dims(3)?, dims(4)?);
                    let f = CompressedFcLayer::new(
                        read_matrix(dir, &format!("{name}.first.bin"), rank, in_dim)?,
                        read_matrix(dir, &format!("{name}.second.bin"), out_dim, rank)?,
                        read_vector(dir, &format!("{name}.bias.bin"), out_dim)?,
                    )?;
                    trunk.push(TrunkLayer {
                        name,
                        op: Linear::Factored(f),
                    });
                    trunk_vel.push(None);
                }
                _ => return Err(parse_err(line_no, format!("malformed layer `{name}`"))),
            }
        }
        if heads.len() != 2 {
            return Err(missing("cls_score and bbox_pred layers"));
        }
        let (bbox, bbox_vel) = heads.pop().expect("two heads");
        let (cls, cls_vel) = heads.pop().expect("two heads");
        let net = DetectionNet {
            pooled_h,
            pooled_w,
            channels,
            num_classes,
            trunk,
            cls,
            bbox,
        };
        validate_shapes(&net)?;
        let state = match (cls_vel, bbox_vel) {
            (Some(cls), Some(bbox)) => Some(SgdState {
                velocity: NetGrads {
                    trunk: trunk_vel
                        .into_iter()
                        .map(|v| v.ok_or_else(|| missing("trunk velocity")))
                        .collect::<Result<_>>()?,
                    cls,
                    bbox,
                },
            }),
            _ => None,
        };
        Ok(Checkpoint {
            net,
            normalizer: TargetNormalizer {
                mean: [mean[0], mean[1], mean[2], mean[3]],
                stddev: [stddev[0], stddev[1], stddev[2], stddev[3]],
            },
            iteration,
            state,
        })
    }
}

fn validate_shapes(net: &DetectionNet) -> Result<()> {
    let mut dim = net.input_dim();
    for layer in &net.trunk {
        if layer.op.in_dim() != dim {
            return Err(Error::ShapeMismatch(format!(
                "layer {} expects {} inputs, previous layer gives {dim}",
                layer.name,
                layer.op.in_dim()
            )));
        }
        dim = layer.op.out_dim();
    }
    if net.cls.in_dim() != dim || net.bbox.in_dim() != dim {
        return Err(Error::ShapeMismatch(
            "head input width differs from trunk output".into(),
        ));
    }
    if net.cls.out_dim() != net.num_classes + 1 || net.bbox.out_dim() != 4 * net.num_classes {
        return Err(Error::ShapeMismatch(
            "head widths do not match the class count".into(),
        ));
    }
    Ok(())
}

/// Replaces trunk layer `name` with its rank-`t` factorization.
pub fn compress_layer(net: &DetectionNet, name: &str, t: usize) -> Result<DetectionNet> {
    let mut out = net.clone();
    let layer = out
        .trunk
        .iter_mut()
        .find(|l| l.name == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "no compressible layer `{name}`; trunk layers are {:?}",
                net.trunk.iter().map(|l| &l.name).collect::<Vec<_>>()
            ))
        })?;
    let dense = match &layer.op {
        Linear::Dense(d) => d,
        Linear::Factored(_) => {
            return Err(Error::Config(format!(
                "layer `{name}` is already compressed"
            )))
        }
    };
    layer.op = Linear::Factored(crate::svd::compress(dense, t)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetConfig, SgdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net() -> DetectionNet {
        let cfg = NetConfig {
            channels: 2,
            pooled_h: 2,
            pooled_w: 2,
            trunk_widths: vec![6, 5],
            num_classes: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        DetectionNet::init(&cfg, &SgdConfig::default(), &mut rng).unwrap()
    }

    fn f32_round(net: &DetectionNet) -> DetectionNet {
        let mut n = net.clone();
        let round = |a: &mut Array2<f64>| a.mapv_inplace(|v| v as f32 as f64);
        for l in &mut n.trunk {
            if let Linear::Dense(d) = &mut l.op {
                round(&mut d.weights);
                d.bias.mapv_inplace(|v| v as f32 as f64);
            }
        }
        for l in [&mut n.cls, &mut n.bbox] {
            round(&mut l.weights);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
        n
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let net = f32_round(&small_net());
        let mut state = SgdState::new(&net).unwrap();
        state.velocity.cls.bias[1] = 0.25;
        let ckpt = Checkpoint {
            net,
            normalizer: TargetNormalizer {
                mean: [0.0, 0.5, -0.25, 1.0],
                stddev: [0.1, 0.1, 0.2, 0.2],
            },
            iteration: 17,
            state: Some(state),
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ckpt);
    }

    #[test]
    fn compressed_layer_round_trips() {
        let net = f32_round(&small_net());
        let compressed = compress_layer(&net, "fc7", 3).unwrap();
        let ckpt = Checkpoint {
            net: compressed,
            normalizer: TargetNormalizer::identity(),
            iteration: 0,
            state: None,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert!(text.contains("layer = fc7 factored 5 6 3"));
        let loaded = Checkpoint::load(dir.path()).unwrap();
        match &loaded.net.trunk[1].op {
            Linear::Factored(f) => assert_eq!(f.rank(), 3),
            other => panic!("expected factored layer, got {other:?}"),
        }
        assert!(loaded.state.is_none());
    }

    #[test]
    fn unknown_layer_is_rejected() {
        assert!(compress_layer(&small_net(), "fc9", 2).is_err());
        let once = compress_layer(&small_net(), "fc6", 2).unwrap();
        assert!(compress_layer(&once, "fc6", 2).is_err());
    }

    #[test]
    fn corrupted_manifest_reports_line() {
        let ckpt = Checkpoint {
            net: small_net(),
            normalizer: TargetNormalizer::identity(),
            iteration: 0,
            state: None,
        };
        let dir = tempfile::tempdir().unwrap();
        ckpt.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("pooled = 2 2", "pooled = 2")).unwrap();
        match Checkpoint::load(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
