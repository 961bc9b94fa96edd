//! On-disk formats for dataset splits and model checkpoints.
//!
//! Binary container, all integers and floats little-endian:
//!
//! ```text
//! "CIVD" | version: u16 | kind: u16 | rows: u64 | cols: u64
//!        | header_len: u64 | header: UTF-8 key=value lines
//!        | rows × cols f64, row-major
//! ```
//!
//! A dataset row is `x, y, z, d` followed by `yr, u, a` when latents are
//! stored. A checkpoint is a single column of floats; its header lists every
//! named array as `entry NAME SHAPE OFFSET` next to the model specs.
//!
//! The text dataset format is tab-separated with a header row naming the
//! columns and `#`-prefixed metadata lines (role and provenance) above it.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{scm_from_text, scm_to_text};
use crate::error::{Error, Result};
use crate::models::{Critic, CriticSpec, EncoderSpec, Predictor, PredictorSpec};
use crate::moments::MomentState;
use crate::scm::{DatasetSplit, FeatureRecord, Latent, SplitRole, TaskMode};
use crate::tensor::{DenseArray, ParameterStore};
use crate::trainer::Checkpoint;

pub const MAGIC: &[u8; 4] = b"CIVD";
pub const VERSION: u16 = 1;
pub const KIND_DATASET: u16 = 0;
pub const KIND_CHECKPOINT: u16 = 1;

struct Container {
    kind: u16,
    rows: usize,
    cols: usize,
    header: String,
    data: Vec<f64>,
}

impl Container {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(34 + self.header.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind.to_le_bytes());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.cols as u64).to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |msg: &str| Error::format(origin, msg);
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| fail("file is truncated"))
        };
        if take(0, 4)? != MAGIC {
            return Err(fail("missing CIVD magic bytes"));
        }
        let u16_at =
            |at| -> Result<u16> { Ok(u16::from_le_bytes(take(at, 2)?.try_into().unwrap())) };
        let u64_at = |at| -> Result<usize> {
            usize::try_from(u64::from_le_bytes(take(at, 8)?.try_into().unwrap()))
                .map_err(|_| fail("size field overflows"))
        };
        let version = u16_at(4)?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let kind = u16_at(6)?;
        let rows = u64_at(8)?;
        let cols = u64_at(16)?;
        let header_len = u64_at(24)?;
        let header = std::str::from_utf8(take(32, header_len)?)
            .map_err(|_| fail("header is not UTF-8"))?
            .to_string();
        let start = 32 + header_len;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| fail("size field overflows"))?;
        if bytes.len() != start + 8 * n {
            return Err(fail(&format!(
                "expected {} payload bytes, found {}",
                8 * n,
                bytes.len().saturating_sub(start)
            )));
        }
        let data = bytes[start..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            kind,
            rows,
            cols,
            header,
            data,
        })
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Header lines of the form `key=value`; lines starting with `scm.` are kept
/// apart as provenance.
struct Header {
    fields: Vec<(String, String)>,
    scm: String,
}

impl Header {
    fn parse(text: &str) -> Self {
        let mut fields = Vec::new();
        let mut scm = String::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("scm.") {
                scm.push_str(line);
                scm.push('\n');
            } else if let Some((k, v)) = line.split_once('=') {
                fields.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        Self { fields, scm }
    }

    fn get(&self, key: &str, origin: &Path) -> Result<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format(origin, format!("header lacks {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str, origin: &Path) -> Result<T> {
        let v = self.get(key, origin)?;
        v.parse()
            .map_err(|_| Error::format(origin, format!("bad value {v} for {key}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    feature_dim: usize,
    n_classes: usize,
    /// `(yr, u, a)` widths when latents are stored.
    latent: Option<(usize, usize, usize)>,
}

impl Layout {
    fn of(split: &DatasetSplit) -> Result<Self> {
        let feature_dim = split
            .records
            .first()
            .map_or(split.provenance.feature_dim, |r| r.x.len());
        let n_classes = split
            .records
            .first()
            .map_or(split.provenance.n_classes, |r| r.y.len());
        let widths = |r: &FeatureRecord| {
            r.latent
                .as_ref()
                .map(|l| (l.y_r.len(), l.u.len(), l.a.len()))
        };
        let latent = split.records.first().and_then(widths);
        for (i, r) in split.records.iter().enumerate() {
            if r.x.len() != feature_dim || r.y.len() != n_classes || widths(r) != latent {
                return Err(Error::dim(format!(
                    "record {i} does not match the layout of record 0"
                )));
            }
        }
        Ok(Self {
            feature_dim,
            n_classes,
            latent,
        })
    }

    fn width(&self) -> usize {
        let (yr, u, a) = self.latent.unwrap_or((0, 0, 0));
        self.feature_dim + self.n_classes + 2 + yr + u + a
    }

    fn header(&self, role: SplitRole) -> String {
        let mut h = format!(
            "role={}\nfeature_dim={}\nn_classes={}\n",
            role.as_str(),
            self.feature_dim,
            self.n_classes
        );
        if let Some((yr, u, a)) = self.latent {
            let _ = writeln!(h, "latent_dims={yr},{u},{a}");
        }
        h
    }

    fn from_header(h: &Header, origin: &Path) -> Result<Self> {
        let latent = match h.get("latent_dims", origin) {
            Err(_) => None,
            Ok(v) => {
                let w: Vec<usize> = v
                    .split(',')
                    .map(|s| s.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(origin, format!("bad latent_dims {v}")))?;
                if w.len() != 3 {
                    return Err(Error::format(origin, "latent_dims needs three widths"));
                }
                Some((w[0], w[1], w[2]))
            }
        };
        Ok(Self {
            feature_dim: h.num("feature_dim", origin)?,
            n_classes: h.num("n_classes", origin)?,
            latent,
        })
    }

    fn flatten(&self, r: &FeatureRecord, out: &mut Vec<f64>) {
        out.extend_from_slice(&r.x);
        out.extend_from_slice(&r.y);
        out.push(r.z as f64);
        out.push(r.d as f64);
        if let Some(l) = &r.latent {
            out.extend_from_slice(&l.y_r);
            out.extend_from_slice(&l.u);
            out.extend_from_slice(&l.a);
        }
    }

    fn record(&self, row: &[f64], origin: &Path) -> Result<FeatureRecord> {
        let (p, c) = (self.feature_dim, self.n_classes);
        let id = |v: f64, what: &str| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::format(
                    origin,
                    format!("{what} value {v} is not an id"),
                ))
            }
        };
        let latent = self.latent.map(|(yr, u, _)| {
            let rest = &row[p + c + 2..];
            Latent {
                y_r: rest[..yr].to_vec(),
                u: rest[yr..yr + u].to_vec(),
                a: rest[yr + u..].to_vec(),
            }
        });
        Ok(FeatureRecord {
            x: row[..p].to_vec(),
            y: row[p..p + c].to_vec(),
            z: id(row[p + c], "z")?,
            d: id(row[p + c + 1], "d")?,
            latent,
        })
    }

    fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.feature_dim).map(|i| format!("x_{i}")).collect();
        names.extend((0..self.n_classes).map(|i| format!("y_{i}")));
        names.push("z".into());
        names.push("d".into());
        if let Some((yr, u, a)) = self.latent {
            names.extend((0..yr).map(|i| format!("yr_{i}")));
            names.extend((0..u).map(|i| format!("u_{i}")));
            names.extend((0..a).map(|i| format!("a_{i}")));
        }
        names
    }
}

pub fn split_to_bytes(split: &DatasetSplit) -> Result<Vec<u8>> {
    let layout = Layout::of(split)?;
    let mut data = Vec::with_capacity(split.len() * layout.width());
    for r in &split.records {
        layout.flatten(r, &mut data);
    }
    let header = layout.header(split.role) + &scm_to_text(&split.provenance);
    Ok(Container {
        kind: KIND_DATASET,
        rows: split.len(),
        cols: layout.width(),
        header,
        data,
    }
    .to_bytes())
}

/// `origin` only labels errors.
pub fn split_from_bytes(bytes: &[u8], origin: &Path) -> Result<DatasetSplit> {
    let c = Container::from_bytes(bytes, origin)?;
    if c.kind != KIND_DATASET {
        return Err(Error::format(origin, "not a dataset file"));
    }
    let h = Header::parse(&c.header);
    let layout = Layout::from_header(&h, origin)?;
    if layout.width() != c.cols {
        return Err(Error::format(
            origin,
            format!("{} columns but header implies {}", c.cols, layout.width()),
        ));
    }
    let role = SplitRole::parse(h.get("role", origin)?)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let provenance = scm_from_text(&h.scm).map_err(|e| Error::format(origin, e.to_string()))?;
    let records = if c.cols == 0 {
        Vec::new()
    } else {
        c.data
            .chunks_exact(c.cols)
            .map(|row| layout.record(row, origin))
            .collect::<Result<_>>()?
    };
    Ok(DatasetSplit {
        records,
        role,
        provenance,
    })
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_file(path, split_to_bytes(split)?)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    split_from_bytes(&read_bytes(path)?, path)
}

/// Tab-separated form; floats use the shortest representation that reads
/// back to the same value.
pub fn split_to_text(split: &DatasetSplit) -> Result<String> {
    let layout = Layout::of(split)?;
    let mut out = String::new();
    for line in layout.header(split.role).lines() {
        let _ = writeln!(out, "# {line}");
    }
    for line in scm_to_text(&split.provenance).lines() {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str(&layout.column_names().join("\t"));
    out.push('\n');
    let (p, c) = (layout.feature_dim, layout.n_classes);
    let mut row = Vec::with_capacity(layout.width());
    for r in &split.records {
        row.clear();
        layout.flatten(r, &mut row);
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, v)| {
                if j == p + c || j == p + c + 1 {
                    format!("{}", *v as usize)
                } else {
                    format!("{v}")
                }
            })
            .collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

pub fn split_from_text(text: &str, origin: &Path) -> Result<DatasetSplit> {
    let mut meta = String::new();
    let mut lines = text.lines();
    let columns = loop {
        match lines.next() {
            Some(l) if l.starts_with('#') => {
                meta.push_str(l.trim_start_matches('#').trim());
                meta.push('\n');
            }
            Some(l) => break l,
            None => return Err(Error::format(origin, "missing column header")),
        }
    };
    let names: Vec<&str> = columns.split('\t').collect();
    let count = |prefix: &str| {
        names
            .iter()
            .filter(|n| {
                n.strip_prefix(prefix)
                    .is_some_and(|i| i.chars().all(|c| c.is_ascii_digit()))
            })
            .count()
    };
    let (yr, u, a) = (count("yr_"), count("u_"), count("a_"));
    let layout = Layout {
        feature_dim: count("x_"),
        n_classes: count("y_"),
        latent: (yr + u + a > 0).then_some((yr, u, a)),
    };
    if layout.column_names() != names {
        return Err(Error::format(
            origin,
            format!("unexpected column header {columns:?}"),
        ));
    }
    let h = Header::parse(&meta);
    let role = SplitRole::parse(h.get("role", origin)?)
        .map_err(|e| Error::format(origin, e.to_string()))?;
    let provenance = scm_from_text(&h.scm).map_err(|e| Error::format(origin, e.to_string()))?;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Vec<f64> = line
            .split('\t')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(origin, format!("data row {}: bad number", i + 1)))?;
        if row.len() != names.len() {
            return Err(Error::format(
                origin,
                format!(
                    "data row {}: {} cells, expected {}",
                    i + 1,
                    row.len(),
                    names.len()
                ),
            ));
        }
        records.push(layout.record(&row, origin)?);
    }
    Ok(DatasetSplit {
        records,
        role,
        provenance,
    })
}

pub fn write_split_text(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_file(path, split_to_text(split)?)
}

pub fn read_split_text(path: &Path) -> Result<DatasetSplit> {
    split_from_text(&read_text(path)?, path)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn encoder_text(e: EncoderSpec) -> String {
    match e {
        EncoderSpec::Identity => "identity".into(),
        EncoderSpec::RandomProjection { dim } => format!("projection:{dim}"),
    }
}

struct Entries {
    lines: String,
    data: Vec<f64>,
}

impl Entries {
    fn push(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        let _ = writeln!(
            self.lines,
            "entry {name} {} {}",
            join(shape),
            self.data.len()
        );
        self.data.extend_from_slice(values);
    }

    fn store(&mut self, prefix: &str, params: &ParameterStore) {
        for (name, p) in params.iter() {
            self.push(&format!("{prefix}/{name}"), p.value.shape(), p.value.data());
            if let Some(u) = &p.sn_u {
                self.push(&format!("{prefix}/{name}#sn_u"), &[u.len()], u);
            }
        }
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut h = String::new();
    let ps = &ckpt.predictor.spec;
    let _ = writeln!(h, "step={}", ckpt.step);
    let _ = writeln!(h, "val_metric={}", ckpt.val_metric);
    let _ = writeln!(h, "predictor.feature_dim={}", ps.feature_dim);
    let _ = writeln!(h, "predictor.hidden_dims={}", join(&ps.hidden_dims));
    let _ = writeln!(h, "predictor.n_classes={}", ps.n_classes);
    let _ = writeln!(h, "predictor.use_demographics={}", ps.use_demographics);
    let _ = writeln!(h, "predictor.n_strata={}", ps.n_strata);
    let _ = writeln!(h, "predictor.d_embed_dim={}", ps.d_embed_dim);
    let _ = writeln!(h, "predictor.task_mode={}", ps.task_mode.as_str());
    let _ = writeln!(h, "predictor.leaky_slope={}", ps.leaky_slope);
    let _ = writeln!(h, "predictor.encoder={}", encoder_text(ps.encoder));
    if let Some(c) = &ckpt.critic {
        let cs = &c.spec;
        let _ = writeln!(h, "critic.n_sites={}", cs.n_sites);
        let _ = writeln!(h, "critic.n_strata={}", cs.n_strata);
        let _ = writeln!(h, "critic.z_embed_dim={}", cs.z_embed_dim);
        let _ = writeln!(h, "critic.d_embed_dim={}", cs.d_embed_dim);
        let _ = writeln!(h, "critic.hidden_dim={}", cs.hidden_dim);
        let _ = writeln!(h, "critic.n_layers={}", cs.n_layers);
        let _ = writeln!(h, "critic.output_dim={}", cs.output_dim);
        let _ = writeln!(h, "critic.leaky_slope={}", cs.leaky_slope);
    }
    let mut e = Entries {
        lines: String::new(),
        data: Vec::new(),
    };
    if let Some(enc) = &ckpt.predictor.encoder {
        e.push("encoder", enc.shape(), enc.data());
    }
    e.store("predictor", &ckpt.predictor_params);
    e.store("critic", &ckpt.critic_params);
    if let Some(m) = &ckpt.moments {
        let _ = writeln!(h, "moments.momentum={}", m.momentum);
        let flat: Vec<f64> = m.mu.iter().flatten().copied().collect();
        e.push("moments.mu", &[m.n_strata(), m.dim()], &flat);
        let init: Vec<f64> = m
            .initialized
            .iter()
            .map(|&b| f64::from(u8::from(b)))
            .collect();
        e.push("moments.initialized", &[m.n_strata()], &init);
    }
    h.push_str(&e.lines);
    Container {
        kind: KIND_CHECKPOINT,
        rows: e.data.len(),
        cols: 1,
        header: h,
        data: e.data,
    }
    .to_bytes()
}

pub fn checkpoint_from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
    let c = Container::from_bytes(bytes, origin)?;
    if c.kind != KIND_CHECKPOINT || c.cols != 1 {
        return Err(Error::format(origin, "not a checkpoint file"));
    }
    let fail = |msg: String| Error::format(origin, msg);
    let mut fields = String::new();
    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for line in c.header.lines() {
        let Some(rest) = line.strip_prefix("entry ") else {
            fields.push_str(line);
            fields.push('\n');
            continue;
        };
        let parts: Vec<&str> = rest.split(' ').collect();
        if parts.len() != 3 {
            return Err(fail(format!("bad manifest line {line:?}")));
        }
        let shape: Vec<usize> = if parts[1].is_empty() {
            Vec::new()
        } else {
            parts[1]
                .split(',')
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| fail(format!("bad shape in {line:?}")))?
        };
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| fail(format!("bad offset in {line:?}")))?;
        let len: usize = shape.iter().product();
        let values = c
            .data
            .get(offset..offset + len)
            .ok_or_else(|| fail(format!("entry {} runs past the payload", parts[0])))?;
        arrays.push((parts[0].to_string(), shape, values.to_vec()));
    }
    let h = Header::parse(&fields);
    let task_mode =
        TaskMode::parse(h.get("predictor.task_mode", origin)?).map_err(|e| fail(e.to_string()))?;
    let hidden_dims: Vec<usize> = h
        .get("predictor.hidden_dims", origin)?
        .split(',')
        .map(|s| s.parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| fail("bad predictor.hidden_dims".into()))?;
    let encoder = match h.get("predictor.encoder", origin)? {
        "identity" => EncoderSpec::Identity,
        other => EncoderSpec::RandomProjection {
            dim: other
                .strip_prefix("projection:")
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| fail(format!("bad encoder {other}")))?,
        },
    };
    let use_demographics = h.get("predictor.use_demographics", origin)? == "true";
    let spec = PredictorSpec {
        feature_dim: h.num("predictor.feature_dim", origin)?,
        hidden_dims,
        n_classes: h.num("predictor.n_classes", origin)?,
        use_demographics,
        n_strata: h.num("predictor.n_strata", origin)?,
        d_embed_dim: h.num("predictor.d_embed_dim", origin)?,
        task_mode,
        leaky_slope: h.num("predictor.leaky_slope", origin)?,
        encoder,
    };
    let critic = if h.get("critic.n_sites", origin).is_ok() {
        Some(Critic {
            spec: CriticSpec {
                n_sites: h.num("critic.n_sites", origin)?,
                n_strata: h.num("critic.n_strata", origin)?,
                z_embed_dim: h.num("critic.z_embed_dim", origin)?,
                d_embed_dim: h.num("critic.d_embed_dim", origin)?,
                hidden_dim: h.num("critic.hidden_dim", origin)?,
                n_layers: h.num("critic.n_layers", origin)?,
                output_dim: h.num("critic.output_dim", origin)?,
                leaky_slope: h.num("critic.leaky_slope", origin)?,
            },
        })
    } else {
        None
    };

    let mut predictor_params = ParameterStore::new();
    let mut critic_params = ParameterStore::new();
    let mut enc = None;
    let (mut mu, mut initialized) = (None, None);
    for (i, (name, shape, values)) in arrays.iter().enumerate() {
        if name.ends_with("#sn_u") {
            continue;
        }
        let array =
            DenseArray::new(shape.clone(), values.clone()).map_err(|e| fail(e.to_string()))?;
        let sn_key = format!("{name}#sn_u");
        let sn_u = arrays
            .get(i + 1)
            .filter(|(n, _, _)| *n == sn_key)
            .map(|(_, _, u)| u.clone());
        let target = if let Some(p) = name.strip_prefix("predictor/") {
            Some((&mut predictor_params, p))
        } else if let Some(p) = name.strip_prefix("critic/") {
            Some((&mut critic_params, p))
        } else {
            None
        };
        match (target, name.as_str()) {
            (Some((store, p)), _) => store
                .insert(p, array, sn_u)
                .map_err(|e| fail(e.to_string()))?,
            (None, "encoder") => enc = Some(array),
            (None, "moments.mu") => mu = Some(array),
            (None, "moments.initialized") => initialized = Some(array),
            (None, other) => return Err(fail(format!("unknown entry {other}"))),
        }
    }
    let moments = match (mu, initialized) {
        (Some(mu), Some(init)) => Some(MomentState {
            mu: mu.to_rows(),
            initialized: init.data().iter().map(|&v| v != 0.0).collect(),
            momentum: h.num("moments.momentum", origin)?,
        }),
        (None, None) => None,
        _ => return Err(fail("moment state is incomplete".into())),
    };
    Ok(Checkpoint {
        predictor: Predictor { spec, encoder: enc },
        predictor_params,
        critic,
        critic_params,
        moments,
        step: h.num("step", origin)?,
        val_metric: h.num("val_metric", origin)?,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_file(path, checkpoint_to_bytes(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_bytes(&read_bytes(path)?, path)
}
