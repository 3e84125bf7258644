//! Seeded instrument simulator. Writes files an instrument configured by a
//! [`TranslationConfig`] might produce, plus a manifest of every value
//! written so end-to-end tests have an oracle.

use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::extractor::{AggregateRule, CompiledConfig, FileFormat, TranslationConfig};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("cannot derive a file name matching {0:?}")]
    NoFileName(Vec<String>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    /// Files per minute; `0` writes them back to back.
    pub rate_per_min: f64,
    pub count: usize,
    /// Inclusive row-count range per aggregate.
    pub rows: (usize, usize),
    pub seed: u64,
    /// Subdirectory under the mount for the files (e.g. a date folder).
    pub subdir: Option<String>,
}

impl SimSpec {
    pub fn new(count: usize, seed: u64) -> Self {
        SimSpec {
            rate_per_min: 0.0,
            count,
            rows: (5, 20),
            seed,
            subdir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSeries {
    pub name: String,
    pub units: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestAggregate {
    pub metadata: Vec<(String, String)>,
    pub series: Vec<ManifestSeries>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    /// Path relative to the mount root.
    pub path: String,
    pub size: u64,
    pub aggregates: Vec<ManifestAggregate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_name: String,
    pub seed: u64,
    pub files: Vec<ManifestFile>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self).expect("serializable"))
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        serde_json::from_slice(&std::fs::read(path)?).map_err(std::io::Error::other)
    }
}

/// A concrete name matching a glob: the first `*` becomes `stem`, later
/// ones `1`; `?` becomes `x`; classes and alternations take their first
/// option.
pub fn name_for_glob(glob: &str, stem: &str) -> String {
    let mut out = String::new();
    let mut stars = 0;
    let mut chars = glob.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '*' => {
                while chars.peek() == Some(&'*') {
                    chars.next();
                }
                out.push_str(if stars == 0 { stem } else { "1" });
                stars += 1;
            }
            '?' => out.push('x'),
            '[' => {
                let mut first = None;
                for c in chars.by_ref() {
                    if c == ']' {
                        break;
                    }
                    if first.is_none() && c != '!' && c != '^' {
                        first = Some(c);
                    }
                }
                out.push(first.unwrap_or('x'));
            }
            '{' => {
                let mut alt = String::new();
                let mut done = false;
                for c in chars.by_ref() {
                    match c {
                        '}' => break,
                        ',' => done = true,
                        c if !done => alt.push(c),
                        _ => {}
                    }
                }
                out.push_str(&alt);
            }
            '\\' => {
                if let Some(n) = chars.next() {
                    out.push(n);
                }
            }
            c => out.push(c),
        }
    }
    out
}

fn file_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// The `index`-th file for `cfg`: (relative path, bytes, manifest entry).
/// Pure: depends only on the config, spec and index.
pub fn generate_file(cc: &CompiledConfig, spec: &SimSpec, index: usize) -> Result<(String, Vec<u8>, ManifestFile), SimError> {
    let cfg = &cc.cfg;
    let stem = format!("sim{}_{index:04}", spec.seed);
    let name = cfg
        .match_patterns
        .iter()
        .map(|g| name_for_glob(g.rsplit('/').next().unwrap_or(g), &stem))
        .find(|n| cc.matches(n))
        .ok_or_else(|| SimError::NoFileName(cfg.match_patterns.clone()))?;
    let path = match &spec.subdir {
        Some(d) => format!("{d}/{name}"),
        None => name,
    };
    let mut rng = file_rng(spec.seed, index);
    let (lo, hi) = (spec.rows.0.max(1), spec.rows.1.max(spec.rows.0.max(1)));

    if cfg.format == FileFormat::BinaryOpaque {
        let mut bytes = vec![0u8; rng.random_range(lo..=hi) * 16];
        rng.fill_bytes(&mut bytes);
        let entry = ManifestFile {
            path: path.clone(),
            size: bytes.len() as u64,
            aggregates: vec![ManifestAggregate {
                metadata: vec![("size_bytes".into(), bytes.len().to_string())],
                series: Vec::new(),
            }],
        };
        return Ok((path, bytes, entry));
    }

    let sep = if cfg.delimiter == "whitespace" {
        " ".to_string()
    } else {
        cfg.delimiter.chars().next().unwrap_or(',').to_string()
    };
    let blocks = match cfg.aggregate_rule {
        AggregateRule::SingleAggregate => 1,
        AggregateRule::SplitOnBlankLine => rng.random_range(1..=3),
    };
    let mut text = String::new();
    for i in 0..cfg.skip_lines {
        text.push_str(&format!("# simulated {} file {index} line {i}\n", cfg.tool_name));
    }
    let mut aggregates = Vec::new();
    for b in 0..blocks {
        if b > 0 {
            text.push('\n');
        }
        let mut metadata = Vec::new();
        if cfg.format == FileFormat::HeaderPlusColumns {
            for (re, rule) in &cc.header_rules {
                if !re.is_match(&rule.metadata_name) {
                    continue;
                }
                let value = format!("d{b}_{:03}", rng.random_range(0..1000));
                text.push_str(&format!("{}: {value}\n", rule.metadata_name));
                metadata.push((rule.metadata_name.clone(), value));
            }
        }
        let rows = rng.random_range(lo..=hi);
        let mut columns: Vec<Vec<String>> = vec![Vec::with_capacity(rows); cfg.columns.len()];
        let start: f64 = (rng.random_range(0..100_000) as f64) / 100.0;
        for r in 0..rows {
            let mut fields = Vec::with_capacity(cfg.columns.len());
            for (j, col) in columns.iter_mut().enumerate() {
                let v = if j == 0 {
                    format!("{:.2}", start + r as f64 * 0.5)
                } else {
                    format!("{:.6}", rng.random_range(-1.0..1.0))
                };
                fields.push(v.clone());
                col.push(v);
            }
            text.push_str(&fields.join(&sep));
            text.push('\n');
        }
        aggregates.push(ManifestAggregate {
            metadata,
            series: cfg
                .columns
                .iter()
                .zip(columns)
                .map(|(c, values)| ManifestSeries {
                    name: c.name.clone(),
                    units: c.units.clone(),
                    values,
                })
                .collect(),
        });
    }
    let bytes = text.into_bytes();
    let entry = ManifestFile {
        path: path.clone(),
        size: bytes.len() as u64,
        aggregates,
    };
    Ok((path, bytes, entry))
}

/// Writes `spec.count` files into `dir`, spaced by the configured rate.
/// `on_write` sees each path right after it lands.
pub async fn simulate(
    cfg: &TranslationConfig,
    spec: &SimSpec,
    dir: &Path,
    mut on_write: impl FnMut(&Path, &ManifestFile),
) -> Result<Manifest, SimError> {
    let cc = CompiledConfig::compile(cfg.clone()).map_err(SimError::Config)?;
    let spacing = (spec.rate_per_min > 0.0).then(|| Duration::from_secs_f64(60.0 / spec.rate_per_min));
    let mut files = Vec::with_capacity(spec.count);
    let begin = tokio::time::Instant::now();
    for i in 0..spec.count {
        if let Some(s) = spacing {
            tokio::time::sleep_until(begin + s * i as u32).await;
        }
        let (rel, bytes, entry) = generate_file(&cc, spec, i)?;
        let full: PathBuf = dir.join(&rel);
        if let Some(parent) = full.parent() {
            tokio::fs::create_dir_all(parent).await?;
        }
        tokio::fs::write(&full, &bytes).await?;
        on_write(&full, &entry);
        files.push(entry);
    }
    Ok(Manifest {
        tool_name: cfg.tool_name.clone(),
        seed: spec.seed,
        files,
    })
}
