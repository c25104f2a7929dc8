//! On-disk formats: raw little-endian `f64` arrays, constraint blobs and the
//! versioned checkpoint container.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approximators::{Approximator, Architecture};
use crate::error::{Error, Result};
use crate::genmodel::{Model, ModelConfig};
use crate::inference::{UnlabeledFactors, VariationalState};
use crate::vobs::{ConstraintBundle, ConstraintKind, GammaPosterior, LinearConstraintSet, Precision};

pub const MAGIC: &[u8; 4] = b"CGSR";
pub const VERSION: u32 = 1;

pub fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(b: &[u8]) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::Format(format!("{} bytes is not a whole number of f64 values", b.len())));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

pub fn write_f64s(path: &Path, v: &[f64]) -> Result<()> {
    fs::write(path, f64s_to_bytes(v))?;
    Ok(())
}

pub fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    bytes_to_f64s(&fs::read(path)?)
}

/// Reads `rows × cols` values stored row by row.
pub fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Vec<Vec<f64>>> {
    let v = read_f64s(path)?;
    if v.len() != rows * cols {
        return Err(Error::Format(format!("{}: expected {} values, found {}", path.display(), rows * cols, v.len())));
    }
    Ok(if cols == 0 { vec![Vec::new(); rows] } else { v.chunks(cols).map(|c| c.to_vec()).collect() })
}

pub fn write_matrix(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    write_f64s(path, &flat)
}

/// Shape and precision of one stored constraint group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHeader {
    pub kind: ConstraintKind,
    pub rows: usize,
    pub cols: usize,
    pub nnz: usize,
    pub precision: Precision,
}

/// Writes every group as `nnz` triplets `(row, col, value)` followed by `α`.
pub fn write_constraints(path: &Path, bundles: &[ConstraintBundle]) -> Result<Vec<Vec<GroupHeader>>> {
    let mut blob = Vec::new();
    let mut headers = Vec::with_capacity(bundles.len());
    for b in bundles {
        let mut hs = Vec::with_capacity(b.groups.len());
        for g in &b.groups {
            let t = g.triplets();
            for (r, c, v) in &t {
                blob.extend([*r as f64, *c as f64, *v]);
            }
            blob.extend(g.alpha.iter());
            hs.push(GroupHeader { kind: g.kind, rows: g.len(), cols: g.gamma.ncols(), nnz: t.len(), precision: g.precision.clone() });
        }
        headers.push(hs);
    }
    write_f64s(path, &blob)?;
    Ok(headers)
}

pub fn read_constraints(path: &Path, headers: &[Vec<GroupHeader>]) -> Result<Vec<ConstraintBundle>> {
    let blob = read_f64s(path)?;
    let mut at = 0;
    let mut take = |n: usize| -> Result<&[f64]> {
        let s = blob.get(at..at + n).ok_or_else(|| Error::Format("constraint blob is truncated".into()))?;
        at += n;
        Ok(s)
    };
    let mut out = Vec::with_capacity(headers.len());
    for hs in headers {
        let mut groups = Vec::with_capacity(hs.len());
        for h in hs {
            let t: Vec<(usize, usize, f64)> = take(3 * h.nnz)?.chunks(3).map(|c| (c[0] as usize, c[1] as usize, c[2])).collect();
            let alpha = take(h.rows)?.to_vec();
            groups.push(LinearConstraintSet::from_triplets(h.kind, h.rows, h.cols, &t, alpha, h.precision.clone())?);
        }
        out.push(ConstraintBundle { groups });
    }
    if at != blob.len() {
        return Err(Error::Format("constraint blob has trailing values".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    json: serde_json::Value,
    sections: Vec<Section>,
}

/// `MAGIC`, version, JSON header length and header, then named `f64` blobs.
fn write_container(path: &Path, json: serde_json::Value, sections: &[(&str, &[f64])]) -> Result<()> {
    let header = Header {
        version: VERSION,
        json,
        sections: sections.iter().map(|(n, v)| Section { name: (*n).into(), len: v.len() }).collect(),
    };
    let hb = serde_json::to_vec(&header)?;
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(hb.len() as u64).to_le_bytes())?;
    f.write_all(&hb)?;
    for (_, v) in sections {
        f.write_all(&f64s_to_bytes(v))?;
    }
    Ok(())
}

fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<(String, Vec<f64>)>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hl = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize.checked_add(hl).filter(|e| *e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..hend])?;
    let mut at = hend;
    let mut out = Vec::with_capacity(header.sections.len());
    for s in header.sections {
        let end = at + 8 * s.len;
        let b = bytes.get(at..end).ok_or_else(|| Error::Format(format!("section {} is truncated", s.name)))?;
        out.push((s.name, bytes_to_f64s(b)?));
        at = end;
    }
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after the last section".into()));
    }
    Ok((header.json, out))
}

fn section(sections: &mut Vec<(String, Vec<f64>)>, name: &str) -> Result<Vec<f64>> {
    let i = sections
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| Error::Format(format!("missing section {name}")))?;
    Ok(sections.swap_remove(i).1)
}

pub fn save_approximator(path: &Path, a: &Approximator) -> Result<()> {
    write_container(path, serde_json::to_value(a.architecture())?, &[("params", &a.params)])
}

pub fn load_approximator(path: &Path) -> Result<Approximator> {
    let (json, mut s) = read_container(path)?;
    let arch: Architecture = serde_json::from_value(json)?;
    let mut a = Approximator::new(arch)?;
    let p = section(&mut s, "params")?;
    if p.len() != a.num_params() {
        return Err(Error::DimensionMismatch { expected: a.num_params(), got: p.len() });
    }
    a.params = p;
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointJson {
    model: ModelConfig,
    fine_grid: usize,
    coarse_grid: usize,
    dim_z: usize,
    encoder: Option<Architecture>,
    gammas: Vec<(ConstraintKind, GammaPosterior)>,
    iteration: usize,
    meta: serde_json::Value,
}

/// A trained model with its variational state and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: VariationalState,
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, state: &VariationalState, meta: serde_json::Value) -> Result<()> {
    let (encoder, unl): (Option<Architecture>, &[f64]) = match &state.unlabeled {
        UnlabeledFactors::PerDatum(v) => (None, v),
        UnlabeledFactors::Amortized(e) => (Some(e.architecture().clone()), &e.params),
    };
    let json = CheckpointJson {
        model: config.clone(),
        fine_grid: config.fine_grid,
        coarse_grid: config.coarse_grid,
        dim_z: config.dim_z,
        encoder,
        gammas: state.gammas.clone(),
        iteration: state.iteration,
        meta,
    };
    let slices = [
        ("params", state.params.values.as_slice()),
        ("labeled", state.labeled.as_slice()),
        ("virtual", state.virtual_.as_slice()),
        ("unlabeled", unl),
    ];
    write_container(path, serde_json::to_value(json)?, &slices)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (json, mut s) = read_container(path)?;
    let j: CheckpointJson = serde_json::from_value(json)?;
    let model = Model::new(j.model.clone())?;
    let params = model.params_from(section(&mut s, "params")?)?;
    let unl = section(&mut s, "unlabeled")?;
    let unlabeled = match j.encoder {
        Some(arch) => {
            let mut e = Approximator::new(arch)?;
            if unl.len() != e.num_params() {
                return Err(Error::DimensionMismatch { expected: e.num_params(), got: unl.len() });
            }
            e.params = unl;
            UnlabeledFactors::Amortized(e)
        }
        None => UnlabeledFactors::PerDatum(unl),
    };
    let virtual_ = section(&mut s, "virtual")?;
    let n_virtual = virtual_.len() / (2 * model.dim_z() + 2 * model.dim_xc()).max(1);
    let state = VariationalState {
        params,
        labeled: section(&mut s, "labeled")?,
        virtual_,
        unlabeled,
        gammas: j.gammas,
        output_factors: vec![None; n_virtual],
        iteration: j.iteration,
    };
    Ok(Checkpoint { model: j.model, state, meta: j.meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximators::Activation;
    use crate::genmodel::ModelConfig;
    use crate::inference::{init_state, Datasets, TrainConfig, UnlabeledDatum};
    use crate::rng;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn f64_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f64");
        let v = vec![1.5, -0.0, f64::MAX, 1e-300];
        write_f64s(&p, &v).unwrap();
        assert_eq!(read_f64s(&p).unwrap(), v);
        assert_eq!(fs::metadata(&p).unwrap().len(), 32);
    }

    #[test]
    fn constraints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.f64");
        let g = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, -1.0, 0.0]);
        let a = LinearConstraintSet::new(ConstraintKind::Cgr, g, DVector::from_vec(vec![0.5, 0.25]), Precision::Exact).unwrap();
        let b = LinearConstraintSet::new(
            ConstraintKind::Flux,
            DMatrix::from_row_slice(1, 3, &[0.0, 3.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            Precision::Learned(GammaPosterior::new(1.0, 1.0).unwrap()),
        )
        .unwrap();
        let bundles = vec![ConstraintBundle { groups: vec![a, b] }, ConstraintBundle { groups: vec![] }];
        let h = write_constraints(&p, &bundles).unwrap();
        let back = read_constraints(&p, &h).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].groups, bundles[0].groups);
        assert!(back[1].groups.is_empty());
    }

    #[test]
    fn approximator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let a = Approximator::init(Architecture::mlp(3, &[4], 2, Activation::Tanh), &mut rng::stream(0, 0)).unwrap();
        save_approximator(&p, &a).unwrap();
        assert_eq!(load_approximator(&p).unwrap(), a);
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_approximator(&p), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        let cfg = ModelConfig::new(4, 2).with_decoder_widths(&[3]);
        let model = Model::new(cfg.clone()).unwrap();
        let data = Datasets { unlabeled: vec![UnlabeledDatum { x: vec![0.1; 16] }], ..Default::default() };
        for amortized in [false, true] {
            let mut s = init_state(&model, &data, &TrainConfig { amortized, encoder_hidden: vec![2], ..Default::default() }).unwrap();
            s.iteration = 17;
            s.set_gamma(ConstraintKind::Flux, GammaPosterior::new(3.0, 2.0).unwrap());
            save_checkpoint(&p, &cfg, &s, serde_json::json!({"elbo": 1.25})).unwrap();
            let c = load_checkpoint(&p).unwrap();
            assert_eq!(c.model, cfg);
            assert_eq!(c.state.params, s.params);
            assert_eq!(c.state.unlabeled, s.unlabeled);
            assert_eq!(c.state.iteration, 17);
            assert_eq!(c.state.gammas, s.gammas);
            assert_eq!(c.meta["elbo"], 1.25);
        }
    }
}
