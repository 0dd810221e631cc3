//! Checkpoint directory layout:
//!
//! ```text
//! net.txt              network config
//! rfield.txt           block{i}.a / block{i}.t / block{i}.b per malleable block
//! params/<name>.t4     every other parameter and the batch-norm running stats
//! optim.txt            optimizer hyper-parameters and step count
//! momentum/<name>.t4   momentum buffers, once a step has been taken
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{NetConfig, OptimState, ParamKind, ToyNet, TrainError};
use crate::kvfile::KvFile;
use crate::rfield::RFieldParams;
use crate::tensor::{self, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ToyNet,
    pub optim: OptimState,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn vector(data: &[f64]) -> Tensor4 {
    Tensor4::from_vec([1, data.len(), 1, 1], data.to_vec()).expect("dims")
}

fn weight_dims(net: &ToyNet, name: &str) -> Option<[usize; 4]> {
    if name == "head.w" {
        return Some(net.head_w.dims());
    }
    let rest = name.strip_prefix("block")?;
    let (i, w) = rest.split_once(".w")?;
    let b = net.blocks.get(i.parse::<usize>().ok()?)?;
    Some(b.conv.banks().get(w.parse::<usize>().ok()?)?.dims())
}

fn save_t4(path: PathBuf, t: &Tensor4) -> Result<PathBuf, TrainError> {
    tensor::save(&path, t).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn load_into(path: &Path, dst: &mut [f64]) -> Result<(), TrainError> {
    let t = tensor::load(path).map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))?;
    if t.len() != dst.len() {
        return Err(TrainError::Checkpoint(format!(
            "{}: {} values, expected {}",
            path.display(),
            t.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(t.data());
    Ok(())
}

/// Writes `net` and `optim` under `dir`; returns the files written.
pub fn save_checkpoint(dir: impl AsRef<Path>, net: &ToyNet, optim: &OptimState) -> Result<Vec<PathBuf>, TrainError> {
    let dir = dir.as_ref();
    let mut written = Vec::new();
    for sub in ["params", "momentum"] {
        fs::create_dir_all(dir.join(sub)).map_err(io(&dir.join(sub)))?;
    }
    let mut kv = KvFile::new();
    net.config.write_kv(&mut kv, "");
    kv.write(dir.join("net.txt"))?;
    written.push(dir.join("net.txt"));

    let mut rf = KvFile::new();
    for (i, r) in net.malleable_blocks() {
        r.write_kv(&mut rf, &format!("block{i}."));
    }
    rf.write(dir.join("rfield.txt"))?;
    written.push(dir.join("rfield.txt"));

    for p in net.params() {
        if matches!(p.kind, ParamKind::RFieldA | ParamKind::RFieldT | ParamKind::RFieldB) {
            continue;
        }
        let t = match weight_dims(net, &p.name) {
            Some(dims) => Tensor4::from_vec(dims, p.data.to_vec())?,
            None => vector(p.data),
        };
        written.push(save_t4(dir.join("params").join(format!("{}.t4", p.name)), &t)?);
    }
    for (i, b) in net.blocks.iter().enumerate() {
        written.push(save_t4(dir.join("params").join(format!("block{i}.bn_mean.t4")), &vector(&b.bn.running_mean))?);
        written.push(save_t4(dir.join("params").join(format!("block{i}.bn_var.t4")), &vector(&b.bn.running_var))?);
    }

    let mut o = KvFile::new();
    o.set("base_lr", optim.base_lr);
    o.set("power", optim.power);
    o.set("max_iter", optim.max_iter);
    o.set("momentum", optim.momentum);
    o.set("weight_decay", optim.weight_decay);
    o.set("rfield_lr_mult", optim.rfield_lr_mult);
    o.set("iter", optim.iter);
    o.set("buffers", !optim.buffers.is_empty());
    o.write(dir.join("optim.txt"))?;
    written.push(dir.join("optim.txt"));
    if !optim.buffers.is_empty() {
        for (p, buf) in net.params().iter().zip(&optim.buffers) {
            written.push(save_t4(dir.join("momentum").join(format!("{}.t4", p.name)), &vector(buf))?);
        }
    }
    Ok(written)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
    let dir = dir.as_ref();
    let cfg = NetConfig::read_kv(&KvFile::read(dir.join("net.txt"))?, "")?;
    let mut net = ToyNet::build(&cfg)?;
    let rf = KvFile::read(dir.join("rfield.txt"))?;
    for (i, b) in net.blocks.iter_mut().enumerate() {
        if let Some(r) = b.conv.rfield_mut() {
            *r = RFieldParams::read_kv(&rf, &format!("block{i}."))
                .map_err(|e| TrainError::Checkpoint(format!("rfield.txt: {e}")))?;
        }
    }
    for p in net.params_mut() {
        if matches!(p.kind, ParamKind::RFieldA | ParamKind::RFieldT | ParamKind::RFieldB) {
            continue;
        }
        load_into(&dir.join("params").join(format!("{}.t4", p.name)), p.data)?;
    }
    for (i, b) in net.blocks.iter_mut().enumerate() {
        load_into(&dir.join("params").join(format!("block{i}.bn_mean.t4")), &mut b.bn.running_mean)?;
        load_into(&dir.join("params").join(format!("block{i}.bn_var.t4")), &mut b.bn.running_var)?;
    }

    let o = KvFile::read(dir.join("optim.txt"))?;
    let mut optim = OptimState {
        base_lr: o.parse_value("base_lr")?,
        power: o.parse_value("power")?,
        max_iter: o.parse_value("max_iter")?,
        momentum: o.parse_value("momentum")?,
        weight_decay: o.parse_value("weight_decay")?,
        rfield_lr_mult: o.parse_value("rfield_lr_mult")?,
        iter: o.parse_value("iter")?,
        buffers: Vec::new(),
    };
    if o.parse_value::<bool>("buffers")? {
        for p in net.params() {
            let mut buf = vec![0.0; p.data.len()];
            load_into(&dir.join("momentum").join(format!("{}.t4", p.name)), &mut buf)?;
            optim.buffers.push(buf);
        }
    }
    Ok(Checkpoint { net, optim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Dataset, SceneConfig};
    use crate::train::{fit, fit_from, TrainConfig};

    #[test]
    fn round_trip_resumes_bit_exactly() {
        let data = Dataset::from_config(&SceneConfig {
            height: 10,
            width: 10,
            scenes: 8,
            min_size: 3,
            max_size: 4,
            ..SceneConfig::default()
        })
        .unwrap();
        let net = ToyNet::build(&NetConfig {
            blocks: 2,
            channels: 3,
            strided: vec![1],
            ..NetConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            batch: 2,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let full = fit(net.clone(), &data, &cfg).unwrap();

        let half = TrainConfig { iterations: 2, ..cfg.clone() };
        let first = fit_from(net, OptimState::new(&cfg), &data, &half, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &first.net, &first.optim).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.net, first.net);
        assert_eq!(ck.optim, first.optim);
        let resumed = fit_from(ck.net, ck.optim, &data, &cfg, |_| {}).unwrap();
        assert_eq!(resumed.net, full.net);
    }

    #[test]
    fn fresh_checkpoint_equals_initialization() {
        let net = ToyNet::build(&NetConfig::default()).unwrap();
        let optim = OptimState::new(&TrainConfig::default());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net, &optim).unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ck.net, net);
        assert_eq!(ck.optim, optim);
    }

    #[test]
    fn missing_file_is_named() {
        let net = ToyNet::build(&NetConfig {
            kind: crate::convops::LayerKind::Standard,
            ..NetConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &net, &OptimState::new(&TrainConfig::default())).unwrap();
        fs::remove_file(dir.path().join("params/block3.w0.t4")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("block3.w0.t4"), "{err}");
    }
}
