//! Synthetic grounding data with a planted selection bias.
//!
//! Each example is a video of `t` feature rows. The gold moment carries the
//! sum of three unit-norm concept signatures (role + action + object). When
//! the action list has at least two entries, a second confusable segment with
//! the same object but a different action is planted elsewhere in the video,
//! so localization requires reading the action word. Background rows carry
//! signatures of unrelated triples. Selection bias lives purely in the
//! (action, object) co-occurrence counts of the query distribution; the test
//! split anti-correlates them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::datamodel::{
    convert_index_to_time, BoundaryIndices, DatasetManifest, DatasetRecord, VideoFeatureSequence,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCount {
    pub action: String,
    pub object: String,
    pub count: u64,
}

/// Generator configuration: vocabulary, per-split (action, object) counts,
/// and feature geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub roles: Vec<String>,
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    #[serde(rename = "cooccurrence_counts")]
    pub train_counts: Vec<PairCount>,
    pub test_counts: Vec<PairCount>,
    pub t: usize,
    pub d_v: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl BiasSpec {
    /// The shipped biased spec: ten objects, each seen 208 times with
    /// "holds" and 35 times with "fixes" in training; the test split swaps
    /// the two counts.
    pub fn default_biased() -> Self {
        let objects: Vec<String> = [
            "vacuum", "window", "laptop", "mirror", "bicycle", "blender", "curtain", "guitar",
            "ladder", "camera",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut train_counts = Vec::new();
        let mut test_counts = Vec::new();
        for obj in &objects {
            train_counts.push(PairCount { action: "holds".into(), object: obj.clone(), count: 208 });
            train_counts.push(PairCount { action: "fixes".into(), object: obj.clone(), count: 35 });
            test_counts.push(PairCount { action: "holds".into(), object: obj.clone(), count: 35 });
            test_counts.push(PairCount { action: "fixes".into(), object: obj.clone(), count: 208 });
        }
        BiasSpec {
            roles: vec!["person".into()],
            actions: vec!["holds".into(), "fixes".into()],
            objects,
            train_counts,
            test_counts,
            t: 32,
            d_v: 32,
            noise_sigma: 0.1,
            seed: 7,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: BiasSpec = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| Error::json("bias spec", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.roles.is_empty() || self.actions.is_empty() || self.objects.is_empty() {
            return Err(Error::Config("roles, actions, and objects must be non-empty".into()));
        }
        if self.t < 10 {
            return Err(Error::Config(format!(
                "t = {} is too small to host a 10% moment",
                self.t
            )));
        }
        if self.d_v == 0 {
            return Err(Error::Config("d_v must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        for (name, counts) in [("train", &self.train_counts), ("test", &self.test_counts)] {
            if !counts.iter().any(|p| p.count > 0) {
                return Err(Error::Config(format!(
                    "{name} split needs at least one pair with count > 0"
                )));
            }
            for p in counts {
                if !self.actions.contains(&p.action) || !self.objects.contains(&p.object) {
                    return Err(Error::Config(format!(
                        "pair ({}, {}) uses words outside the action/object lists",
                        p.action, p.object
                    )));
                }
            }
        }
        Ok(())
    }
}

fn fnv1a64(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for p in parts {
        for b in p.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h ^= 0x1f;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One standard gaussian draw via Box-Muller (two uniform draws per call).
fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Unit-norm latent vector for a concept word, fixed given the master seed.
/// Values are f32-exact so feature files round-trip losslessly.
pub fn concept_signature(seed: u64, kind: &str, word: &str, d_v: usize) -> Vec<f64> {
    let stream = 0x4000_0000_0000_0000 | (fnv1a64(&[kind, word]) >> 2);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut v: Vec<f64> = (0..d_v).map(|_| gauss(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x = quantize(*x / norm);
    }
    v
}

struct Signatures {
    roles: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    objects: Vec<Vec<f64>>,
}

impl Signatures {
    fn build(spec: &BiasSpec) -> Self {
        let sig = |kind: &str, words: &[String]| {
            words.iter().map(|w| concept_signature(spec.seed, kind, w, spec.d_v)).collect()
        };
        Signatures {
            roles: sig("role", &spec.roles),
            actions: sig("action", &spec.actions),
            objects: sig("object", &spec.objects),
        }
    }
}

fn moment_len_range(t: usize) -> (usize, usize) {
    let min_len = ((0.1 * t as f64).ceil() as usize).max(1);
    let max_len = ((0.4 * t as f64).floor() as usize).max(min_len);
    (min_len, max_len)
}

/// Longest run of free positions and a uniform choice of start among all
/// feasible placements of a `len`-long segment avoiding `taken`.
fn place_segment(
    rng: &mut ChaCha12Rng,
    t: usize,
    len: usize,
    taken: Option<(usize, usize)>,
) -> Option<(usize, usize)> {
    let fits = |s: usize| match taken {
        None => true,
        Some((a, b)) => s + len - 1 < a || s > b,
    };
    let starts: Vec<usize> = (0..=t - len).filter(|&s| fits(s)).collect();
    if starts.is_empty() {
        return None;
    }
    let s = starts[rng.random_range(0..starts.len())];
    Some((s, s + len - 1))
}

fn split_stream(split_id: u64, index: u64) -> u64 {
    (split_id << 40) | index
}

fn generate_split(
    spec: &BiasSpec,
    sigs: &Signatures,
    split: &str,
    split_id: u64,
    counts: &[PairCount],
) -> Result<DatasetManifest> {
    let (min_len, max_len) = moment_len_range(spec.t);
    let duration = spec.t as f64;
    // stable example order: counts sorted by (action, object)
    let mut ordered: Vec<&PairCount> = counts.iter().filter(|p| p.count > 0).collect();
    ordered.sort_by(|a, b| (&a.action, &a.object).cmp(&(&b.action, &b.object)));

    let mut records = Vec::new();
    let mut global_idx: u64 = 0;
    for pair in ordered {
        let action_idx = spec.actions.iter().position(|a| *a == pair.action).unwrap();
        let object_idx = spec.objects.iter().position(|o| *o == pair.object).unwrap();
        for k in 0..pair.count {
            let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
            rng.set_stream(split_stream(split_id, global_idx));
            global_idx += 1;

            let role_idx = rng.random_range(0..spec.roles.len());
            let len = rng.random_range(min_len..=max_len);
            let (g_start, g_end) =
                place_segment(&mut rng, spec.t, len, None).expect("gold always fits");

            // confusable segment: same object, different action
            let confusable = if spec.actions.len() >= 2 {
                let mut other = rng.random_range(0..spec.actions.len() - 1);
                if other >= action_idx {
                    other += 1;
                }
                let mut c_len = rng.random_range(min_len..=max_len);
                loop {
                    match place_segment(&mut rng, spec.t, c_len, Some((g_start, g_end))) {
                        Some(span) => break Some((other, span)),
                        // gold covers at most 40% of t, so a shorter segment
                        // always fits eventually
                        None if c_len > 1 => c_len -= 1,
                        None => break None,
                    }
                }
            } else {
                None
            };

            let mut features = Mat::zeros((spec.t, spec.d_v));
            let add_triple = |row: &mut [f64], r: usize, a: usize, o: usize| {
                for j in 0..spec.d_v {
                    row[j] = sigs.roles[r][j] + sigs.actions[a][j] + sigs.objects[o][j];
                }
            };
            for ti in g_start..=g_end {
                let mut row = vec![0.0; spec.d_v];
                add_triple(&mut row, role_idx, action_idx, object_idx);
                for (j, v) in row.iter().enumerate() {
                    features[[ti, j]] = *v;
                }
            }
            if let Some((other_action, (c_start, c_end))) = confusable {
                let c_role = rng.random_range(0..spec.roles.len());
                for ti in c_start..=c_end {
                    let mut row = vec![0.0; spec.d_v];
                    add_triple(&mut row, c_role, other_action, object_idx);
                    for (j, v) in row.iter().enumerate() {
                        features[[ti, j]] = *v;
                    }
                }
            }

            // background: contiguous runs of untouched rows each carry one
            // unrelated triple (object differs from the query object)
            let occupied = |ti: usize| {
                (g_start..=g_end).contains(&ti)
                    || confusable.is_some_and(|(_, (a, b))| (a..=b).contains(&ti))
            };
            let mut ti = 0;
            while ti < spec.t {
                if occupied(ti) {
                    ti += 1;
                    continue;
                }
                let run_start = ti;
                while ti < spec.t && !occupied(ti) {
                    ti += 1;
                }
                let b_role = rng.random_range(0..spec.roles.len());
                let b_action = rng.random_range(0..spec.actions.len());
                let b_object = if spec.objects.len() >= 2 {
                    let mut o = rng.random_range(0..spec.objects.len() - 1);
                    if o >= object_idx {
                        o += 1;
                    }
                    o
                } else {
                    object_idx
                };
                for bi in run_start..ti {
                    let mut row = vec![0.0; spec.d_v];
                    add_triple(&mut row, b_role, b_action, b_object);
                    for (j, v) in row.iter().enumerate() {
                        features[[bi, j]] = *v;
                    }
                }
            }

            for ti in 0..spec.t {
                for j in 0..spec.d_v {
                    let noisy = features[[ti, j]] + spec.noise_sigma * gauss(&mut rng);
                    features[[ti, j]] = quantize(noisy);
                }
            }

            let gold = BoundaryIndices::new(g_start, g_end, spec.t)?;
            let time = convert_index_to_time(&gold, duration)?;
            records.push(DatasetRecord {
                id: format!("{split}-{}-{}-{k:04}", pair.action, pair.object),
                time,
                query: format!(
                    "{} {} a {}",
                    spec.roles[role_idx], pair.action, pair.object
                ),
                features: VideoFeatureSequence::new(features)?,
            });
        }
    }
    DatasetManifest::new(split, spec.t, spec.d_v, records)
}

/// Generate the biased train split and the anti-correlated test split.
/// Deterministic given the spec (per-example RNG streams are derived from
/// the seed and the example index).
pub fn generate_dataset(spec: &BiasSpec) -> Result<(DatasetManifest, DatasetManifest)> {
    spec.validate()?;
    let sigs = Signatures::build(spec);
    let train = generate_split(spec, &sigs, "train", 0, &spec.train_counts)?;
    let test = generate_split(spec, &sigs, "test", 1, &spec.test_counts)?;
    Ok((train, test))
}

/// Co-occurrence counts of (action, object) parsed back out of the queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BiasReport {
    pub pairs: BTreeMap<String, u64>,
    pub other: u64,
    pub total: u64,
}

fn pair_key(action: &str, object: &str) -> String {
    format!("{action}|{object}")
}

/// Count (action, object) pairs over a manifest's queries using the fixed
/// four-slot template "<role> <action> a <object>"; anything else lands in
/// `other`. Counts always sum to the number of records.
pub fn bias_report(manifest: &DatasetManifest) -> BiasReport {
    let mut report = BiasReport::default();
    for rec in &manifest.records {
        let toks = crate::vocab::tokenize(&rec.query);
        if toks.len() == 4 && (toks[2] == "a" || toks[2] == "an") {
            *report.pairs.entry(pair_key(&toks[1], &toks[3])).or_insert(0) += 1;
        } else {
            report.other += 1;
        }
        report.total += 1;
    }
    report
}

impl BiasReport {
    pub fn count(&self, action: &str, object: &str) -> u64 {
        self.pairs.get(&pair_key(action, object)).copied().unwrap_or(0)
    }
}

impl fmt::Display for BiasReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .pairs
            .keys()
            .map(|k| k.len() + 2)
            .chain(std::iter::once(16))
            .max()
            .unwrap_or(16);
        writeln!(f, "{:<width$} {:>8}", "(action, object)", "count")?;
        for (key, count) in &self.pairs {
            let label = match key.split_once('|') {
                Some((a, o)) => format!("({a}, {o})"),
                None => key.clone(),
            };
            writeln!(f, "{label:<width$} {count:>8}")?;
        }
        if self.other > 0 {
            writeln!(f, "{:<width$} {:>8}", "other", self.other)?;
        }
        write!(f, "{:<width$} {:>8}", "total", self.total)
    }
}
