//! Checkpoint directories: a text manifest plus one little-endian binary per array.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::Config;
use super::optim::{OptimKind, Optimizer};
use crate::error::{ensure, Error, Result};
use crate::networks::Architecture;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "derain-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Search,
    Train,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Search => "search",
            Stage::Train => "train",
            Stage::Finetune => "finetune",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "search" => Ok(Stage::Search),
            "train" => Ok(Stage::Train),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::Integrity(format!("unknown stage `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub arch: Architecture,
    pub stage: Stage,
    /// Optimizer steps completed in this stage.
    pub step: u64,
    /// Epochs completed in this stage.
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizers: BTreeMap<String, Optimizer>,
}

fn arch_line(a: &Architecture) -> String {
    match a {
        Architecture::Relaxed => "relaxed".into(),
        Architecture::Discrete { cell, align } => format!("discrete {cell} {align}"),
    }
}

fn parse_arch(s: &str) -> Result<Architecture> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    match parts.as_slice() {
        ["relaxed"] => Ok(Architecture::Relaxed),
        ["discrete", cell, align] => Ok(Architecture::Discrete {
            cell: cell.parse().map_err(|e: Error| Error::Integrity(e.to_string()))?,
            align: align.parse().map_err(|e: Error| Error::Integrity(e.to_string()))?,
        }),
        _ => Err(Error::Integrity(format!("bad architecture line `{s}`"))),
    }
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(16).map(|b| format!("{b:02x}")).collect()
}

fn shape_text(s: &[usize]) -> String {
    if s.is_empty() {
        return "scalar".into();
    }
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "scalar" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Integrity(format!("bad shape `{s}`"))))
        .collect()
}

impl Checkpoint {
    fn arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (format!("param:{n}"), t)).collect();
        for (oname, opt) in &self.optimizers {
            for (slot, store) in [("first", &opt.first), ("second", &opt.second)] {
                for (n, t) in store.iter() {
                    out.push((format!("opt:{oname}:{slot}:{n}"), t));
                }
            }
        }
        out
    }

    fn manifest(&self, files: &[(String, String, String, String)]) -> String {
        let mut m = String::new();
        writeln!(m, "{FORMAT} {FORMAT_VERSION}").unwrap();
        writeln!(m, "config_hash = {}", self.config.hash()).unwrap();
        writeln!(m, "stage = {}", self.stage.name()).unwrap();
        writeln!(m, "step = {}", self.step).unwrap();
        writeln!(m, "epoch = {}", self.epoch).unwrap();
        // Data order and augmentation are drawn from streams keyed by (seed, epoch, step).
        writeln!(m, "rng.seed = {}", self.config.seed).unwrap();
        writeln!(m, "rng.position = {}", self.step).unwrap();
        writeln!(m, "arch = {}", arch_line(&self.arch)).unwrap();
        for (name, opt) in &self.optimizers {
            writeln!(m, "optimizer {name} = {} ; t = {}", opt.kind.describe(), opt.t).unwrap();
        }
        for line in self.config.to_toml_lines().lines() {
            writeln!(m, "config.{line}").unwrap();
        }
        for (file, shape, sum, name) in files {
            writeln!(m, "array {file} f64 {shape} {sum} {name}").unwrap();
        }
        m
    }
}

/// Writes into a sibling temporary directory and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let arrays_dir = tmp.join("arrays");
    fs::create_dir_all(&arrays_dir).map_err(|e| Error::io(&arrays_dir, e))?;
    let mut files = Vec::new();
    for (i, (name, t)) in ckpt.arrays().into_iter().enumerate() {
        let file = format!("arrays/{i:05}.bin");
        let bytes = to_bytes(t);
        let p = tmp.join(&file);
        fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        files.push((file, shape_text(t.shape()), checksum(&bytes), name));
    }
    let mp = tmp.join(MANIFEST);
    fs::write(&mp, ckpt.manifest(&files)).map_err(|e| Error::io(&mp, e))?;
    let old: PathBuf = path.with_extension(format!("old-{}", std::process::id()));
    if path.exists() {
        fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = path.join(MANIFEST);
    if !mp.is_file() {
        return Err(Error::NotFound(mp));
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let version = header
        .strip_prefix(FORMAT)
        .map(str::trim)
        .ok_or_else(|| Error::Integrity(format!("{} is not a checkpoint manifest", mp.display())))?;
    ensure!(
        version == FORMAT_VERSION.to_string(),
        Integrity,
        "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
    );

    let mut fields = BTreeMap::new();
    let mut config_text = String::new();
    let mut optimizers = BTreeMap::new();
    let mut arrays = Vec::new();
    for line in lines {
        if let Some(rest) = line.strip_prefix("array ") {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            ensure!(parts.len() == 5 && parts[1] == "f64", Integrity, "bad array line `{line}`");
            arrays.push((parts[0], parse_shape(parts[2])?, parts[3], parts[4]));
        } else if let Some(rest) = line.strip_prefix("config.") {
            config_text.push_str(rest);
            config_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("optimizer ") {
            let (name, desc) = rest
                .split_once(" = ")
                .ok_or_else(|| Error::Integrity(format!("bad optimizer line `{line}`")))?;
            let (kind, t) = desc
                .split_once(" ; t = ")
                .ok_or_else(|| Error::Integrity(format!("bad optimizer line `{line}`")))?;
            let mut opt = Optimizer::new(OptimKind::parse(kind)?);
            opt.t = t.parse().map_err(|_| Error::Integrity(format!("bad optimizer step in `{line}`")))?;
            optimizers.insert(name.to_string(), opt);
        } else if let Some((k, v)) = line.split_once(" = ") {
            fields.insert(k.to_string(), v.to_string());
        } else if !line.trim().is_empty() {
            return Err(Error::Integrity(format!("unrecognized manifest line `{line}`")));
        }
    }
    let field = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| Error::Integrity(format!("manifest lacks `{k}`")))
    };
    let num = |k: &str| -> Result<u64> {
        field(k)?
            .parse()
            .map_err(|_| Error::Integrity(format!("manifest field `{k}` is not a count")))
    };

    let mut config = Config::light();
    config
        .apply_toml(&config_text)
        .map_err(|e| Error::Integrity(format!("embedded configuration: {e}")))?;
    ensure!(
        config.hash() == field("config_hash")?,
        Integrity,
        "configuration hash does not match the manifest"
    );

    let mut params = ParamStore::new();
    for (file, shape, sum, name) in arrays {
        let p = path.join(file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let n: usize = shape.iter().product();
        ensure!(
            bytes.len() == 8 * n,
            Integrity,
            "array `{name}` holds {} bytes, manifest says {n} f64 values",
            bytes.len()
        );
        ensure!(checksum(&bytes) == sum, Integrity, "checksum mismatch for array `{name}`");
        let data = bytes
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_vec(&shape, data)?;
        if let Some(pname) = name.strip_prefix("param:") {
            params.insert(pname, t);
        } else if let Some(rest) = name.strip_prefix("opt:") {
            let mut it = rest.splitn(3, ':');
            let (oname, slot, pname) = match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(Error::Integrity(format!("bad optimizer array `{name}`"))),
            };
            let opt = optimizers
                .get_mut(oname)
                .ok_or_else(|| Error::Integrity(format!("array `{name}` names an undeclared optimizer")))?;
            match slot {
                "first" => opt.first.insert(pname, t),
                "second" => opt.second.insert(pname, t),
                _ => return Err(Error::Integrity(format!("bad optimizer slot in `{name}`"))),
            }
        } else {
            return Err(Error::Integrity(format!("unrecognized array `{name}`")));
        }
    }

    Ok(Checkpoint {
        config,
        arch: parse_arch(&field("arch")?)?,
        stage: Stage::parse(&field("stage")?)?,
        step: num("step")?,
        epoch: num("epoch")?,
        params,
        optimizers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::MacroChoice;
    use crate::searchspace::CellSpec;

    fn sample() -> Checkpoint {
        let cfg = Config::toy();
        let model = cfg.derived_model().unwrap();
        let params = model.init_params(3).unwrap();
        let mut opt = Optimizer::new(OptimKind::adam());
        opt.t = 7;
        opt.first.insert("dna.head.b", Tensor::from_vec(&[3], vec![0.1, f64::MIN_POSITIVE, -0.0]).unwrap());
        opt.second.insert("dna.head.b", Tensor::from_vec(&[3], vec![1e-300, 2.0, 3.0]).unwrap());
        let mut optimizers = BTreeMap::new();
        optimizers.insert("weights".to_string(), opt);
        Checkpoint {
            config: cfg,
            arch: Architecture::Discrete {
                cell: CellSpec::light(),
                align: MacroChoice::Ofm,
            },
            stage: Stage::Train,
            step: 42,
            epoch: 3,
            params,
            optimizers,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, c);
        for (n, t) in c.params.iter() {
            let b = back.params.get(n).unwrap();
            assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // Saving again over an existing checkpoint replaces it.
        save_checkpoint(&back, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&sample(), &path).unwrap();
        let bin = path.join("arrays/00000.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&bin, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));

        save_checkpoint(&sample(), &path).unwrap();
        let mp = path.join(MANIFEST);
        let text = fs::read_to_string(&mp).unwrap();
        fs::write(&mp, text.replacen("derain-checkpoint 1", "derain-checkpoint 9", 1)).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"));

        fs::write(&mp, text.replace("config.train.lr0 = 0.002", "config.train.lr0 = 0.5")).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("none")), Err(Error::NotFound(_))));
    }
}
