//! `DPPN1` checkpoints.
//!
//! Layout, all integers little-endian u32 and floats little-endian f32:
//!
//! ```text
//! "DPPN1"
//! len, config echo (UTF-8)
//! n, n × (len, name, DPT1 tensor)
//! m, m × projection record
//! ```
//!
//! A projection record is `prototype, image, a, b, len, source name, ρ,
//! ρ × (Δ₁, Δ₂), cosine`.
//!
//! Tensor names: `backbone.{i}.weight`, `backbone.{i}.bias` (`1×1×1×n`),
//! `prototypes` (`P × d̃ × rows × cols`), `offsets.{0,1}.{weight,bias}`
//! (absent without deformation) and `last_layer` (`1×1×P×K`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_exact_or_truncated, read_tensor, read_u32, write_tensor};
use crate::model::{init_model, Model};
use crate::tensor::Tensor4;
use crate::train::ProjectionRecord;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DPPN1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub projections: Vec<ProjectionRecord>,
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::InvalidInput(format!("{what} {v} exceeds u32")))
}

fn put_str(out: &mut Vec<u8>, s: &str, what: &str) -> Result<()> {
    out.extend_from_slice(&u32_of(s.len(), what)?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn get_str(input: &mut &[u8], what: &str) -> Result<String> {
    let len = read_u32(input, what)? as usize;
    if len > input.len() {
        return Err(Error::Decode(format!("truncated while reading {what}")));
    }
    let mut buf = vec![0u8; len];
    read_exact_or_truncated(input, &mut buf, what)?;
    String::from_utf8(buf).map_err(|_| Error::Decode(format!("{what} is not UTF-8")))
}

fn get_f32(input: &mut &[u8], what: &str) -> Result<f32> {
    Ok(f32::from_bits(read_u32(input, what)?))
}

fn vec_tensor(v: &[f32]) -> Tensor4 {
    Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).expect("non-empty parameter")
}

/// Named tensors in file order.
pub fn model_tensors(model: &Model) -> Vec<(String, Tensor4)> {
    let mut out = Vec::new();
    for (i, l) in model.backbone.layers.iter().enumerate() {
        out.push((format!("backbone.{i}.weight"), l.weight.clone()));
        out.push((format!("backbone.{i}.bias"), vec_tensor(&l.bias)));
    }
    let protos = &model.layer.prototypes;
    let (g, ch) = (model.layer.grid, model.layer.channels());
    let mut data = Vec::with_capacity(protos.len() * ch * g.rho());
    for p in protos {
        for j in 0..ch {
            for k in 0..g.rho() {
                data.push(p.part(k)[j]);
            }
        }
    }
    out.push((
        "prototypes".into(),
        Tensor4::from_vec([protos.len(), ch, g.rows, g.cols], data).expect("prototype dims"),
    ));
    if let Some(b) = &model.layer.branch {
        for (i, l) in [&b.hidden, &b.output].into_iter().enumerate() {
            out.push((format!("offsets.{i}.weight"), l.weight.clone()));
            out.push((format!("offsets.{i}.bias"), vec_tensor(&l.bias)));
        }
    }
    out.push((
        "last_layer".into(),
        Tensor4::from_vec([1, 1, model.last.num_prototypes, model.last.num_classes], model.last.weights.clone())
            .expect("last layer dims"),
    ));
    out
}

fn assign(model: &mut Model, name: &str, t: Tensor4) -> Result<()> {
    let dims = t.dims();
    let mismatch = |want: [usize; 4]| Error::Decode(format!("tensor {name} has dims {dims:?}, expected {want:?}"));
    let set_vec = |dst: &mut Vec<f32>, t: &Tensor4| -> Result<()> {
        let want = [1, 1, 1, dst.len()];
        if t.dims() != want {
            return Err(mismatch(want));
        }
        dst.copy_from_slice(t.data());
        Ok(())
    };
    let set_tensor = |dst: &mut Tensor4, t: Tensor4| -> Result<()> {
        if t.dims() != dst.dims() {
            return Err(mismatch(dst.dims()));
        }
        *dst = t;
        Ok(())
    };
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["backbone", i, field] | ["offsets", i, field] => {
            let i: usize = i.parse().map_err(|_| Error::Decode(format!("bad tensor name {name}")))?;
            let layer = if parts[0] == "backbone" {
                model.backbone.layers.get_mut(i)
            } else {
                model.layer.branch.as_mut().and_then(|b| [&mut b.hidden, &mut b.output].into_iter().nth(i))
            }
            .ok_or_else(|| Error::Decode(format!("unexpected tensor {name}")))?;
            match *field {
                "weight" => set_tensor(&mut layer.weight, t),
                "bias" => set_vec(&mut layer.bias, &t),
                _ => Err(Error::Decode(format!("unexpected tensor {name}"))),
            }
        }
        ["prototypes"] => {
            let (g, ch) = (model.layer.grid, model.layer.channels());
            let want = [model.layer.prototypes.len(), ch, g.rows, g.cols];
            if t.dims() != want {
                return Err(mismatch(want));
            }
            let rho = g.rho();
            for (pi, p) in model.layer.prototypes.iter_mut().enumerate() {
                for k in 0..rho {
                    for j in 0..ch {
                        p.part_mut(k)[j] = t.data()[(pi * ch + j) * rho + k];
                    }
                }
            }
            Ok(())
        }
        ["last_layer"] => {
            let want = [1, 1, model.last.num_prototypes, model.last.num_classes];
            if t.dims() != want {
                return Err(mismatch(want));
            }
            model.last.weights.copy_from_slice(t.data());
            Ok(())
        }
        _ => Err(Error::Decode(format!("unexpected tensor {name}"))),
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_str(&mut out, &self.config.echo(), "config echo")?;
        let tensors = model_tensors(&self.model);
        out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?);
        for (name, t) in &tensors {
            put_str(&mut out, name, "tensor name")?;
            write_tensor(&mut out, t)?;
        }
        out.extend_from_slice(&u32_of(self.projections.len(), "record count")?);
        for r in &self.projections {
            for (v, what) in [(r.prototype, "prototype"), (r.image, "image"), (r.center.0, "center"), (r.center.1, "center")] {
                out.extend_from_slice(&u32_of(v, what)?);
            }
            put_str(&mut out, &r.source, "source name")?;
            out.extend_from_slice(&u32_of(r.deltas.len(), "part count")?);
            for &(d1, d2) in &r.deltas {
                out.extend_from_slice(&d1.to_le_bytes());
                out.extend_from_slice(&d2.to_le_bytes());
            }
            out.extend_from_slice(&r.cosine.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        let mut magic = [0u8; 5];
        read_exact_or_truncated(&mut input, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Decode(format!("bad checkpoint magic {magic:?}")));
        }
        let echo = get_str(&mut input, "config echo")?;
        let config = RunConfig::parse(&echo).map_err(|e| Error::Decode(format!("config echo: {e}")))?;
        let mut model = init_model(&config.model, config.seed)?;
        let expected: Vec<String> = model_tensors(&model).into_iter().map(|(n, _)| n).collect();
        let count = read_u32(&mut input, "tensor count")? as usize;
        let mut names = Vec::with_capacity(expected.len());
        for _ in 0..count {
            let name = get_str(&mut input, "tensor name")?;
            if names.contains(&name) {
                return Err(Error::Decode(format!("tensor {name} appears twice")));
            }
            let t = read_tensor(&mut input)?;
            assign(&mut model, &name, t)?;
            names.push(name);
        }
        if let Some(missing) = expected.iter().find(|n| !names.contains(n)) {
            return Err(Error::Decode(format!("missing tensor {missing}")));
        }
        let num_records = read_u32(&mut input, "record count")? as usize;
        let mut projections = Vec::new();
        for _ in 0..num_records {
            let prototype = read_u32(&mut input, "record")? as usize;
            let image = read_u32(&mut input, "record")? as usize;
            let a = read_u32(&mut input, "record")? as usize;
            let b = read_u32(&mut input, "record")? as usize;
            let source = get_str(&mut input, "source name")?;
            let rho = read_u32(&mut input, "part count")? as usize;
            if rho != model.layer.grid.rho() {
                return Err(Error::Decode(format!("record has {rho} parts, prototypes have {}", model.layer.grid.rho())));
            }
            let mut deltas = Vec::with_capacity(rho);
            for _ in 0..rho {
                deltas.push((get_f32(&mut input, "delta")?, get_f32(&mut input, "delta")?));
            }
            let cosine = get_f32(&mut input, "cosine")?;
            if prototype >= model.num_prototypes() {
                return Err(Error::Decode(format!("record for unknown prototype {prototype}")));
            }
            projections.push(ProjectionRecord {
                prototype,
                image,
                source,
                center: (a, b),
                deltas,
                cosine,
            });
        }
        if !input.is_empty() {
            return Err(Error::Decode(format!("{} trailing bytes", input.len())));
        }
        Ok(Self {
            config,
            model,
            projections,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(nd: bool) -> Checkpoint {
        let mut config = RunConfig::default();
        config.seed = 5;
        config.model.deformable = !nd;
        config.sync();
        let mut model = init_model(&config.model, 5).unwrap();
        if let Some(b) = model.layer.branch.as_mut() {
            b.output.weight.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = (i as f32).sin() * 1e-3);
        }
        model.last.weights[0] = -0.0;
        let rho = model.layer.grid.rho();
        Checkpoint {
            config,
            model,
            projections: vec![ProjectionRecord {
                prototype: 1,
                image: 3,
                source: "train/c0_003.ppm".into(),
                center: (2, 5),
                deltas: (0..rho).map(|k| (k as f32 * 0.25, -0.5)).collect(),
                cosine: 0.999_999_9,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for nd in [false, true] {
            let c = sample(nd);
            let bytes = c.encode().unwrap();
            let back = Checkpoint::decode(&bytes).unwrap();
            assert_eq!(back.encode().unwrap(), bytes);
            assert_eq!(back, c);
            assert!(back.model.last.weights[0].is_sign_negative());
        }
    }

    #[test]
    fn nd_checkpoints_have_no_offset_tensors() {
        let names: Vec<String> = model_tensors(&sample(true).model).into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.starts_with("offsets")));
        let names: Vec<String> = model_tensors(&sample(false).model).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.iter().filter(|n| n.starts_with("offsets")).count(), 4);
    }

    #[test]
    fn decode_errors() {
        let bytes = sample(false).encode().unwrap();
        assert!(Checkpoint::decode(&[]).is_err());
        assert!(Checkpoint::decode(b"DPPN2").is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
