//! Plain-text file formats.
//!
//! Embeddings are one record per line, `id modality group v1 v2 ...`, with
//! floats in shortest round-trip form. Manifests, metrics and COCOS reports
//! are flat `key=value` files. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use cocos_core::cocos::CocosReport;
use cocos_core::synth::{IdentifierInjection, Split, SynthConfig, SynthDataset, Tuple};
use cocos_core::trainer::{Checkpoint, EncoderPair, Matrix, TrainLog};
use cocos_core::{EmbeddingVector, Modality};

use crate::error::{LabError, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parsed `key=value` file. Later duplicates are rejected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    path: std::path::PathBuf,
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in content_lines(text) {
            let (k, v) = line.split_once('=').ok_or_else(|| LabError::parse(path, n, "expected key=value"))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(LabError::parse(path, n, format!("duplicate key {}", k.trim())));
            }
        }
        Ok(Self { path: path.to_path_buf(), map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key).ok_or_else(|| LabError::parse(&self.path, 0, format!("missing key {key}")))?;
        v.parse().map_err(|_| LabError::parse(&self.path, 0, format!("bad value for {key}: {v}")))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

pub fn format_embedding_line(v: &EmbeddingVector, group: u64) -> String {
    let mut s = format!("{} {} {}", v.id(), v.modality(), group);
    for x in v.values() {
        write!(s, " {x}").unwrap();
    }
    s
}

/// Parses one `id modality group v...` record.
pub fn parse_embedding_line(line: &str) -> std::result::Result<(EmbeddingVector, u64), String> {
    let mut it = line.split_whitespace();
    let mut field = |name: &str| it.next().ok_or_else(|| format!("missing {name}"));
    let id: u64 = field("id")?.parse().map_err(|_| "bad id".to_string())?;
    let modality: Modality = field("modality")?.parse().map_err(|e| format!("{e}"))?;
    let group: u64 = field("group")?.parse().map_err(|_| "bad group".to_string())?;
    let values = it
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad value {t}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let v = EmbeddingVector::new(id, modality, values).map_err(|e| e.to_string())?;
    Ok((v, group))
}

fn format_split(tuples: &[Tuple]) -> Result<String> {
    let mut out = String::new();
    for t in tuples {
        let img = EmbeddingVector::new(t.index, Modality::Image, t.image.clone())?;
        out.push_str(&format_embedding_line(&img, t.index));
        out.push('\n');
        for (j, c) in t.captions.iter().enumerate() {
            let cap = EmbeddingVector::new(t.caption_id(j), Modality::Caption, c.clone())?;
            out.push_str(&format_embedding_line(&cap, t.index));
            out.push('\n');
        }
    }
    Ok(out)
}

fn parse_split(path: &Path, text: &str, k: usize) -> Result<Vec<Tuple>> {
    let mut tuples: Vec<Tuple> = Vec::new();
    let mut index_of = BTreeMap::new();
    let mut captions: Vec<(usize, u64, Vec<f64>, usize)> = Vec::new();
    for (n, line) in content_lines(text) {
        let (v, group) = parse_embedding_line(line).map_err(|m| LabError::parse(path, n, m))?;
        match v.modality() {
            Modality::Image => {
                if v.id() != group || index_of.insert(group, tuples.len()).is_some() {
                    return Err(LabError::parse(path, n, "image id must equal its unique group"));
                }
                tuples.push(Tuple { index: group, image: v.into_values(), captions: Vec::new() });
            }
            Modality::Caption => captions.push((n, v.id(), v.into_values(), group as usize)),
        }
    }
    captions.sort_by_key(|c| c.1);
    for (n, id, values, group) in captions {
        let slot = *index_of
            .get(&(group as u64))
            .ok_or_else(|| LabError::parse(path, n, format!("caption {id} has no image {group}")))?;
        let t = &mut tuples[slot];
        if id != t.index * k as u64 + t.captions.len() as u64 {
            return Err(LabError::parse(path, n, format!("caption {id} out of sequence for tuple {group}")));
        }
        t.captions.push(values);
    }
    if let Some(t) = tuples.iter().find(|t| t.captions.len() != k) {
        return Err(LabError::parse(path, 0, format!("tuple {} has {} captions, expected {k}", t.index, t.captions.len())));
    }
    Ok(tuples)
}

pub fn format_manifest(c: &SynthConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
    kv("num_tuples", c.num_tuples.to_string());
    kv("captions_per_image", c.captions_per_image.to_string());
    kv("core_dim", c.core_dim.to_string());
    kv("nuisance_dim", c.nuisance_dim.to_string());
    kv("noise_scale", c.noise_scale.to_string());
    kv("val_fraction", c.val_fraction.to_string());
    kv("test_fraction", c.test_fraction.to_string());
    kv("seed", c.seed.to_string());
    kv("latent_dim", c.latent_dim().to_string());
    match c.injection {
        None => kv("injection", "off".into()),
        Some(inj) => {
            kv("injection", "on".into());
            kv("id_count", inj.count.to_string());
            kv("id_dim", inj.id_dim.to_string());
            kv("id_scale", inj.scale.to_string());
        }
    }
    s
}

pub fn parse_manifest(kv: &KeyValues) -> Result<SynthConfig> {
    let injection = match kv.raw("injection").unwrap_or("off") {
        "off" => None,
        "on" => Some(IdentifierInjection { count: kv.get("id_count")?, id_dim: kv.get("id_dim")?, scale: kv.get("id_scale")? }),
        other => return Err(LabError::Config(format!("injection must be on or off, got {other}"))),
    };
    let c = SynthConfig {
        num_tuples: kv.get("num_tuples")?,
        captions_per_image: kv.get("captions_per_image")?,
        core_dim: kv.get("core_dim")?,
        nuisance_dim: kv.get("nuisance_dim")?,
        noise_scale: kv.get("noise_scale")?,
        injection,
        val_fraction: kv.get("val_fraction")?,
        test_fraction: kv.get("test_fraction")?,
        seed: kv.get("seed")?,
    };
    if let Some(d) = kv.raw("latent_dim") {
        if d.parse::<usize>().ok() != Some(c.latent_dim()) {
            return Err(LabError::Config(format!("latent_dim {d} does not match the block sizes")));
        }
    }
    Ok(c)
}

fn split_file(dir: &Path, split: Split) -> std::path::PathBuf {
    dir.join(format!("{}.emb", split.name()))
}

/// Writes `manifest.txt` and one `.emb` file per split into `dir`.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<()> {
    write_text(&dir.join("manifest.txt"), &format_manifest(&ds.config))?;
    for split in Split::ALL {
        write_text(&split_file(dir, split), &format_split(ds.split(split))?)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    let config = parse_manifest(&KeyValues::load(&dir.join("manifest.txt"))?)?;
    let k = config.captions_per_image;
    let mut parts = Vec::new();
    for split in Split::ALL {
        let path = split_file(dir, split);
        parts.push(parse_split(&path, &read_text(&path)?, k)?);
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok(SynthDataset::from_parts(config, train, val, test)?)
}

/// Header comment with epoch and validation rsum, then one line per matrix
/// row: `row role 0 w...`.
pub fn format_checkpoint(ck: &Checkpoint) -> Result<String> {
    let mut s = format!("# epoch={} val_rsum={}\n", ck.epoch, ck.val_rsum);
    for m in [Modality::Image, Modality::Caption] {
        let w = ck.encoders.weights(m);
        for r in 0..w.rows() {
            let row = EmbeddingVector::new(r as u64, m, w.row(r).to_vec())?;
            s.push_str(&format_embedding_line(&row, 0));
            s.push('\n');
        }
    }
    Ok(s)
}

pub fn parse_checkpoint(path: &Path, text: &str) -> Result<Checkpoint> {
    let header = text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| LabError::parse(path, 1, "missing checkpoint header"))?;
    let meta = KeyValues::parse(path, &header.split_whitespace().collect::<Vec<_>>().join("\n"))?;
    let mut rows: BTreeMap<(u8, u64), Vec<f64>> = BTreeMap::new();
    for (n, line) in content_lines(text) {
        let (v, _) = parse_embedding_line(line).map_err(|m| LabError::parse(path, n, m))?;
        let role = u8::from(v.modality() == Modality::Caption);
        if rows.insert((role, v.id()), v.into_values()).is_some() {
            return Err(LabError::parse(path, n, "duplicate row"));
        }
    }
    let matrix = |role: u8| -> Result<Matrix> {
        let rs: Vec<_> = rows.range((role, 0)..=(role, u64::MAX)).collect();
        let cols = rs.first().map_or(0, |(_, v)| v.len());
        let contiguous = rs.iter().enumerate().all(|(i, ((_, id), v))| *id == i as u64 && v.len() == cols);
        if !contiguous {
            return Err(LabError::parse(path, 0, "matrix rows must be 0..n with equal widths"));
        }
        Ok(Matrix::from_rows(rs.len(), cols, rs.into_iter().flat_map(|(_, v)| v.iter().copied()).collect())?)
    };
    Ok(Checkpoint {
        encoders: EncoderPair::new(matrix(0)?, matrix(1)?)?,
        epoch: meta.get("epoch")?,
        val_rsum: meta.get("val_rsum")?,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(path, &read_text(path)?)
}

pub fn format_train_log(log: &TrainLog) -> String {
    let mut s = format!("# initial_val_rsum={}\n# epoch loss val_rsum lr\n", log.initial_val_rsum);
    for e in &log.epochs {
        writeln!(s, "{} {} {} {}", e.epoch, e.loss, e.val_rsum, e.lr).unwrap();
    }
    s
}

/// `key=value` record of a COCOS report, one `<stat>.mean`, `<stat>.std` and
/// comma-separated `<stat>.per_batch` entry per statistic.
pub fn format_cocos(r: &CocosReport) -> String {
    let mut s = String::new();
    writeln!(s, "loss={}", r.loss).unwrap();
    writeln!(s, "direction={}", r.direction).unwrap();
    writeln!(s, "epsilon={}", r.epsilon).unwrap();
    writeln!(s, "batch_n={}", r.batch_n).unwrap();
    writeln!(s, "queries_per_batch={}", r.queries_per_batch).unwrap();
    writeln!(s, "num_batches={}", r.num_batches()).unwrap();
    for st in &r.stats {
        writeln!(s, "{}.mean={}", st.name, st.mean).unwrap();
        writeln!(s, "{}.std={}", st.name, st.std).unwrap();
        let per: Vec<String> = st.per_batch.iter().map(f64::to_string).collect();
        writeln!(s, "{}.per_batch={}", st.name, per.join(",")).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use cocos_core::synth::generate;

    #[test]
    fn embedding_lines_round_trip_exactly() {
        let v = EmbeddingVector::new(7, Modality::Caption, vec![0.1, -1e-300, 1.0 / 3.0, 12345.678]).unwrap();
        let line = format_embedding_line(&v, 3);
        assert!(line.starts_with("7 caption 3 0.1 "));
        assert_eq!(parse_embedding_line(&line).unwrap(), (v, 3));
        assert!(parse_embedding_line("1 image").is_err());
        assert!(parse_embedding_line("1 video 0 1.0").is_err());
        assert!(parse_embedding_line("1 image 0 nan").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig {
            num_tuples: 20,
            injection: Some(IdentifierInjection { count: 2, id_dim: 3, scale: 0.5 }),
            ..Default::default()
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn manifest_rejects_inconsistent_dims() {
        let mut text = format_manifest(&SynthConfig::default());
        text = text.replace("latent_dim=32", "latent_dim=31");
        let kv = KeyValues::parse(Path::new("m"), &text).unwrap();
        assert!(parse_manifest(&kv).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint { encoders: EncoderPair::init(5, 3, 1).unwrap(), epoch: 4, val_rsum: 123.25 };
        let text = format_checkpoint(&ck).unwrap();
        assert_eq!(parse_checkpoint(Path::new("c"), &text).unwrap(), ck);
        assert!(parse_checkpoint(Path::new("c"), "0 image 0 1.0\n").is_err());
    }

    #[test]
    fn key_values() {
        let kv = KeyValues::parse(Path::new("x"), "# c\na = 1\nb=two\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), 1);
        assert_eq!(kv.raw("b"), Some("two"));
        assert!(kv.get::<u32>("b").is_err());
        assert!(KeyValues::parse(Path::new("x"), "a=1\na=2").is_err());
        assert!(KeyValues::parse(Path::new("x"), "novalue").is_err());
    }
}
