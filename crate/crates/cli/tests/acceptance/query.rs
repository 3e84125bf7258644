//! Boolean search against a brute-force scan of what was generated.

use chrono::{DateTime, NaiveDate, NaiveTime, TimeZone, Utc};
use lims_core::datastore::{BooleanQuery, Datastore, FileFacts, Predicate, Scope};
use lims_core::extractor::{extract, FileFormat, TranslationConfig};
use lims_core::format::{
    Aggregate, DataDocument, DataSeries, Descriptor, DocRole, FileLink, NamedRef, Timestamp, ToolKind,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOOLS: [(&str, &[&str]); 4] = [
    ("N and K", &["Wavelength", "Reflectance"]),
    ("JV", &["Voltage", "Current"]),
    ("XRD Bruker", &["TwoTheta", "Counts"]),
    ("Profilometer", &["Position", "Height"]),
];
const PROJECTS: [&str; 3] = ["CIGS", "AZO", "CdTe"];

/// Ground truth for one generated file.
struct Truth {
    id: i64,
    tool: &'static str,
    project: Option<&'static str>,
    sample: Option<String>,
    when: DateTime<Utc>,
    path: String,
    descriptors: Vec<&'static str>,
}

fn start_of(d: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&d.and_time(NaiveTime::MIN))
}

fn end_of(d: NaiveDate) -> DateTime<Utc> {
    start_of(d) + chrono::Duration::days(1) - chrono::Duration::milliseconds(1)
}

enum Bound {
    Day(NaiveDate),
    Instant(DateTime<Utc>),
}

impl Bound {
    fn text(&self) -> String {
        match self {
            Bound::Day(d) => d.format("%Y-%m-%d").to_string(),
            Bound::Instant(t) => t.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        }
    }
}

struct Vocab {
    samples: Vec<String>,
    paths: Vec<String>,
}

fn oracle(q: &Oracle, t: &Truth) -> bool {
    match q {
        Oracle::And(v) => v.iter().all(|q| oracle(q, t)),
        Oracle::Or(v) => v.iter().any(|q| oracle(q, t)),
        Oracle::Not(q) => !oracle(q, t),
        Oracle::Tool(s) => t.tool == s,
        Oracle::Project(s) => t.project == Some(s.as_str()),
        Oracle::Sample(s) => t.sample.as_deref().is_some_and(|c| c.contains(s.as_str())),
        Oracle::Dates(from, to) => {
            let lo = from.as_ref().map(|b| match b {
                Bound::Day(d) => start_of(*d),
                Bound::Instant(i) => *i,
            });
            let hi = to.as_ref().map(|b| match b {
                Bound::Day(d) => end_of(*d),
                Bound::Instant(i) => *i,
            });
            lo.is_none_or(|lo| t.when >= lo) && hi.is_none_or(|hi| t.when <= hi)
        }
        Oracle::Descriptor(s) => t.descriptors.iter().any(|d| d == s),
        Oracle::Path(s) => t.path.contains(s.as_str()),
    }
}

/// The test's own query tree, evaluated by [`oracle`] and translated to
/// the library's form.
enum Oracle {
    And(Vec<Oracle>),
    Or(Vec<Oracle>),
    Not(Box<Oracle>),
    Tool(String),
    Project(String),
    Sample(String),
    Dates(Option<Bound>, Option<Bound>),
    Descriptor(String),
    Path(String),
}

impl Oracle {
    fn to_query(&self) -> BooleanQuery {
        match self {
            Oracle::And(v) => BooleanQuery::and(v.iter().map(Oracle::to_query)),
            Oracle::Or(v) => BooleanQuery::or(v.iter().map(Oracle::to_query)),
            Oracle::Not(q) => BooleanQuery::not(q.to_query()),
            Oracle::Tool(s) => BooleanQuery::atom(Predicate::ToolName(s.clone())),
            Oracle::Project(s) => BooleanQuery::atom(Predicate::Project(s.clone())),
            Oracle::Sample(s) => BooleanQuery::atom(Predicate::SampleCode(s.clone())),
            Oracle::Dates(f, t) => BooleanQuery::atom(Predicate::DateRange {
                from: f.as_ref().map(Bound::text),
                to: t.as_ref().map(Bound::text),
            }),
            Oracle::Descriptor(s) => BooleanQuery::atom(Predicate::DescriptorName(s.clone())),
            Oracle::Path(s) => BooleanQuery::atom(Predicate::FilePath(s.clone())),
        }
    }
}

fn random_day(rng: &mut ChaCha8Rng) -> NaiveDate {
    NaiveDate::from_ymd_opt(2012, 1, 1).unwrap() + chrono::Duration::days(rng.random_range(0..730))
}

fn random_bound(rng: &mut ChaCha8Rng) -> Bound {
    let d = random_day(rng);
    if rng.random_bool(0.5) {
        Bound::Day(d)
    } else {
        Bound::Instant(start_of(d) + chrono::Duration::seconds(rng.random_range(0..86_400)))
    }
}

fn atom(rng: &mut ChaCha8Rng, v: &Vocab) -> Oracle {
    match rng.random_range(0..6) {
        0 => Oracle::Tool(if rng.random_bool(0.9) {
            TOOLS.choose(rng).unwrap().0.into()
        } else {
            "Ellipsometer".into()
        }),
        1 => Oracle::Project(if rng.random_bool(0.9) {
            PROJECTS.choose(rng).unwrap().to_string()
        } else {
            "Perovskite".into()
        }),
        2 => {
            let s = v.samples.choose(rng).unwrap();
            // a prefix or the whole code
            let cut = rng.random_range(3..=s.len());
            Oracle::Sample(s[..cut].to_string())
        }
        3 => {
            let (mut a, mut b) = (random_bound(rng), random_bound(rng));
            let key = |b: &Bound| match b {
                Bound::Day(d) => start_of(*d),
                Bound::Instant(i) => *i,
            };
            if key(&a) > key(&b) {
                std::mem::swap(&mut a, &mut b);
            }
            match rng.random_range(0..3) {
                0 => Oracle::Dates(Some(a), None),
                1 => Oracle::Dates(None, Some(b)),
                _ => Oracle::Dates(Some(a), Some(b)),
            }
        }
        4 => {
            let all: Vec<&str> = TOOLS.iter().flat_map(|t| t.1.iter().copied()).chain(["Temperature"]).collect();
            Oracle::Descriptor(all.choose(rng).unwrap().to_string())
        }
        _ => Oracle::Path(v.paths.choose(rng).unwrap().clone()),
    }
}

fn random_query(rng: &mut ChaCha8Rng, v: &Vocab, depth: usize) -> Oracle {
    if depth <= 1 || rng.random_bool(0.25) {
        return atom(rng, v);
    }
    match rng.random_range(0..5) {
        0 => Oracle::Not(Box::new(random_query(rng, v, depth - 1))),
        1 | 2 => Oracle::And((0..rng.random_range(2..=3)).map(|_| random_query(rng, v, depth - 1)).collect()),
        _ => Oracle::Or((0..rng.random_range(2..=3)).map(|_| random_query(rng, v, depth - 1)).collect()),
    }
}

fn document(tool: &str, path: &str, when: DateTime<Utc>, names: &[&str]) -> DataDocument {
    let ts = Timestamp::from_utc(when);
    DataDocument {
        role: DocRole::Archive,
        timestamp: ts.clone(),
        doc_id: String::new(),
        kind: ToolKind::Characterization,
        measurement_type: NamedRef::new(None, tool),
        tool: NamedRef::new(None, tool),
        operator_id: None,
        data_file_link: FileLink {
            timestamp: ts,
            file: path.into(),
        },
        comments: String::new(),
        aggregates: vec![Aggregate {
            metadata: Vec::new(),
            series: names
                .iter()
                .enumerate()
                .map(|(i, n)| DataSeries::new(Descriptor::new(*n, "-"), vec![format!("{i}.0"), "1.5".into()]))
                .collect(),
            extras: Default::default(),
        }],
        extras: Default::default(),
        body_extras: Default::default(),
    }
}

pub fn oracle_equivalence() -> String {
    let dir = tempfile::tempdir().unwrap();
    let store = Datastore::open(dir.path().join("q.db")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut truth = Vec::with_capacity(1000);

    for i in 0..1000 {
        let (tool, cols) = TOOLS[rng.random_range(0..TOOLS.len())];
        // a file reaches its project through its sample; samples belong to
        // one project, some to none, and some files have no sample at all
        let (project, sample) = match rng.random_range(0..10) {
            0 => (None, None),
            1 => (None, Some(format!("misc-{:03}", rng.random_range(0..20)))),
            _ => {
                let p = PROJECTS[rng.random_range(0..PROJECTS.len())];
                let code = format!("{}-{:04}-{:05}", p.to_lowercase(), rng.random_range(0..8), rng.random_range(0..40));
                (Some(p), Some(code))
            }
        };
        let day = random_day(&mut rng);
        let when = start_of(day) + chrono::Duration::seconds(rng.random_range(0..86_400));
        let slug = tool.to_lowercase().replace(' ', "");
        let path = format!(
            "{slug}/data/{}/{}_{i:04}.dat",
            day.format("%Y%m%d"),
            sample.as_deref().unwrap_or("unlabeled")
        );
        let mut descriptors: Vec<&'static str> = cols.to_vec();
        if rng.random_bool(0.2) {
            descriptors.push("Temperature");
        }

        let cfg = TranslationConfig::new(tool, &["*"], FileFormat::DelimitedColumns, &[]);
        let mut doc = document(tool, &path, when, &descriptors);
        let facts = FileFacts {
            archive_path: path.clone(),
            original_path: format!("/mnt/{path}"),
            file_timestamp: when,
            size: 64,
            version: 1,
        };
        let receipt = extract(&store, &mut doc, &cfg, &facts, sample.as_deref(), project, None).unwrap();
        truth.push(Truth {
            id: receipt.file_id,
            tool,
            project,
            sample,
            when,
            path,
            descriptors,
        });
    }

    let vocab = Vocab {
        samples: truth.iter().filter_map(|t| t.sample.clone()).collect(),
        paths: {
            let mut p: Vec<String> = truth.iter().map(|t| t.path.split('/').next().unwrap().to_string()).collect();
            p.extend(truth.iter().step_by(37).map(|t| t.path.rsplit('/').next().unwrap().to_string()));
            p.extend(["/data/2013".to_string(), "/data/201206".to_string()]);
            p
        },
    };

    let (mut empty, mut full) = (0, 0);
    for n in 0..50 {
        let q = random_query(&mut rng, &vocab, 4);
        let lib = q.to_query();
        assert!(lib.depth() <= 4);
        let got = store.evaluate(&lib, &Scope::All).unwrap();
        let mut want: Vec<i64> = truth.iter().filter(|t| oracle(&q, t)).map(|t| t.id).collect();
        want.sort();
        assert_eq!(
            got,
            want,
            "query {n} differs: {}",
            serde_json::to_string(&lib).unwrap()
        );
        empty += usize::from(want.is_empty());
        full += usize::from(want.len() == truth.len());
    }
    format!(
        "50/50 queries match the linear scan over 1000 files ({} empty, {} all, {} partial)",
        empty,
        full,
        50 - empty - full
    )
}
