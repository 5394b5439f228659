//! Synthetic interaction logs, the JSON-lines dataset format, and batching.
//!
//! The latent world: every catalog item has a fixed feature vector `x`, every
//! request a fresh user vector `u`, and the user/item affinity is
//! `q·x + uᵀ W x` (a global quality term plus a personal bilinear term). A
//! logged policy ranks the request's candidates by affinity plus Gaussian
//! noise and exposes the top `m`. Feedback per exposed item:
//!
//! * `show` = 1 always,
//! * `click` ~ Bernoulli(sigmoid(affinity + position_bias[i])),
//! * `next_slide` ~ Bernoulli(sigmoid(-affinity)).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::rng::{stream, substream, Stream};

pub const TASKS: [&str; 3] = ["show", "click", "next_slide"];
pub const NUM_TASKS: usize = 3;
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RerankRequest {
    pub request_id: u64,
    pub user: Vec<f64>,
    pub candidates: Vec<Candidate>,
}

impl RerankRequest {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn position_of(&self, item: u64) -> Option<usize> {
        self.candidates.iter().position(|c| c.id == item)
    }

    /// Shape check against the expected candidate count and feature widths.
    pub fn validate(&self, n: usize, d_u: usize, d_x: usize) -> Result<()> {
        let fail = |reason: String| {
            Err(Error::Request {
                request_id: self.request_id,
                reason,
            })
        };
        if self.candidates.len() != n {
            return fail(format!("expected {n} candidates, got {}", self.candidates.len()));
        }
        if self.user.len() != d_u {
            return fail(format!("user width {} != {d_u}", self.user.len()));
        }
        if let Some(c) = self.candidates.iter().find(|c| c.x.len() != d_x) {
            return fail(format!("candidate {} width {} != {d_x}", c.id, c.x.len()));
        }
        let mut seen = HashSet::new();
        if let Some(c) = self.candidates.iter().find(|c| !seen.insert(c.id)) {
            return fail(format!("duplicate candidate id {}", c.id));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedOutcome {
    pub exposed: Vec<u64>,
    /// `m x 3` binary labels in [`TASKS`] order.
    pub labels: Vec<[u8; NUM_TASKS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub request: RerankRequest,
    pub outcome: LoggedOutcome,
}

impl Record {
    /// Candidate positions of the exposed items, in exposure order.
    pub fn target(&self) -> Vec<usize> {
        self.outcome
            .exposed
            .iter()
            .map(|&id| self.request.position_of(id).expect("validated record"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub requests: usize,
    pub catalog: usize,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub d_u: usize,
    pub d_x: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<Record>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_requests: usize,
    pub catalog_size: usize,
    pub n: usize,
    pub m: usize,
    pub d_u: usize,
    pub d_x: usize,
    pub seed: u64,
    /// Std of the logged policy's ranking noise.
    pub noise: f64,
    /// Click logit offset at the first position; falls linearly to `-position_bias`.
    pub position_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_requests: 20_000,
            catalog_size: 500,
            n: 20,
            m: 4,
            d_u: 8,
            d_x: 16,
            seed: 0,
            noise: 0.5,
            position_bias: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.catalog_size < self.n {
            return bad(format!("catalog {} < n {}", self.catalog_size, self.n));
        }
        if self.m == 0 || self.m > self.n {
            return bad(format!("m {} must be in 1..=n ({})", self.m, self.n));
        }
        if self.d_u == 0 || self.d_x == 0 {
            return bad("feature widths must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be >= 0", self.noise));
        }
        if !self.position_bias.is_finite() {
            return bad("position_bias must be finite".into());
        }
        Ok(())
    }
}

/// Linearly decreasing click offsets, `+scale` at the top to `-scale` at the bottom.
pub fn position_bias(m: usize, scale: f64) -> Vec<f64> {
    if m == 1 {
        return vec![0.0];
    }
    (0..m)
        .map(|i| scale * (1.0 - 2.0 * i as f64 / (m - 1) as f64))
        .collect()
}

/// The hidden preference model behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct LatentWorld {
    quality: Vec<f64>,
    /// `d_u x d_x`, row-major.
    interaction: Vec<f64>,
    d_x: usize,
}

impl LatentWorld {
    pub fn sample(d_u: usize, d_x: usize, rng: &mut impl Rng) -> Self {
        let q = Normal::new(0.0, (1.0 / d_x as f64).sqrt()).expect("std");
        let w = Normal::new(0.0, (1.0 / (d_u * d_x) as f64).sqrt()).expect("std");
        Self {
            quality: (0..d_x).map(|_| q.sample(rng)).collect(),
            interaction: (0..d_u * d_x).map(|_| w.sample(rng)).collect(),
            d_x,
        }
    }

    pub fn affinity(&self, user: &[f64], x: &[f64]) -> f64 {
        let global: f64 = self.quality.iter().zip(x).map(|(a, b)| a * b).sum();
        let personal: f64 = user
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let row = &self.interaction[i * self.d_x..(i + 1) * self.d_x];
                u * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum();
        global + personal
    }
}

/// Draw `[show, click, next_slide]` for one exposed item.
pub fn sample_labels(affinity: f64, bias: f64, rng: &mut impl Rng) -> [u8; NUM_TASKS] {
    let click = rng.random::<f64>() < sigmoid(affinity + bias);
    let next = rng.random::<f64>() < sigmoid(-affinity);
    [1, click as u8, next as u8]
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, Stream::Data);
    let world = LatentWorld::sample(cfg.d_u, cfg.d_x, &mut rng);
    let catalog: Vec<Vec<f64>> = (0..cfg.catalog_size)
        .map(|_| (0..cfg.d_x).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let bias = position_bias(cfg.m, cfg.position_bias);

    let mut records = Vec::with_capacity(cfg.num_requests);
    for rid in 0..cfg.num_requests {
        let user: Vec<f64> = (0..cfg.d_u).map(|_| rng.sample(StandardNormal)).collect();
        let picks = index::sample(&mut rng, cfg.catalog_size, cfg.n).into_vec();
        let candidates: Vec<Candidate> = picks
            .iter()
            .map(|&i| Candidate {
                id: i as u64,
                x: catalog[i].clone(),
            })
            .collect();
        let affinity: Vec<f64> = candidates.iter().map(|c| world.affinity(&user, &c.x)).collect();
        let scores: Vec<f64> = affinity
            .iter()
            .map(|&a| a + cfg.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut order: Vec<usize> = (0..cfg.n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(cfg.m);
        let labels = order
            .iter()
            .enumerate()
            .map(|(pos, &i)| sample_labels(affinity[i], bias[pos], &mut rng))
            .collect();
        records.push(Record {
            request: RerankRequest {
                request_id: rid as u64,
                user,
                candidates,
            },
            outcome: LoggedOutcome {
                exposed: order.iter().map(|&i| picks[i] as u64).collect(),
                labels,
            },
        });
    }
    Ok(Dataset {
        manifest: Manifest {
            version: FORMAT_VERSION,
            requests: cfg.num_requests,
            catalog: cfg.catalog_size,
            n: cfg.n,
            m: cfg.m,
            k: NUM_TASKS,
            d_u: cfg.d_u,
            d_x: cfg.d_x,
            seed: cfg.seed,
        },
        records,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    request_id: u64,
    user: Vec<f64>,
    candidates: Vec<Candidate>,
    exposed: Vec<u64>,
    labels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Check one record against the manifest.
    pub fn validate_record(manifest: &Manifest, r: &Record) -> Result<()> {
        let req = &r.request;
        req.validate(manifest.n, manifest.d_u, manifest.d_x)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        let fail = |reason: String| Err(Error::Dataset(format!("request {}: {reason}", req.request_id)));
        if r.outcome.exposed.len() != manifest.m {
            return fail(format!(
                "expected {} exposed items, got {}",
                manifest.m,
                r.outcome.exposed.len()
            ));
        }
        let mut seen = HashSet::new();
        for &id in &r.outcome.exposed {
            if req.position_of(id).is_none() {
                return fail(format!("exposed item {id} is not among the candidates"));
            }
            if !seen.insert(id) {
                return fail(format!("exposed item {id} repeated"));
            }
        }
        if r.outcome.labels.len() != manifest.m {
            return fail(format!("expected {} label rows", manifest.m));
        }
        if r.outcome.labels.iter().flatten().any(|&l| l > 1) {
            return fail("labels must be 0 or 1".into());
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.manifest)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            let line = RecordLine {
                request_id: r.request.request_id,
                user: r.request.user.clone(),
                candidates: r.request.candidates.clone(),
                exposed: r.outcome.exposed.clone(),
                labels: r.outcome.labels.iter().map(|l| l.to_vec()).collect(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let head = lines.next().ok_or_else(|| Error::Dataset("empty file".into()))??;
        let manifest: Manifest = serde_json::from_str(&head).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported version {}", manifest.version)));
        }
        if manifest.k != NUM_TASKS {
            return Err(Error::Dataset(format!("k must be {NUM_TASKS}, got {}", manifest.k)));
        }
        let mut records = Vec::with_capacity(manifest.requests);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: RecordLine =
                serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("record line {}: {e}", i + 2)))?;
            let labels = raw
                .labels
                .iter()
                .map(|row| {
                    <[u8; NUM_TASKS]>::try_from(row.as_slice()).map_err(|_| {
                        Error::Dataset(format!(
                            "request {}: label row width {} != {NUM_TASKS}",
                            raw.request_id,
                            row.len()
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rec = Record {
                request: RerankRequest {
                    request_id: raw.request_id,
                    user: raw.user,
                    candidates: raw.candidates,
                },
                outcome: LoggedOutcome {
                    exposed: raw.exposed,
                    labels,
                },
            };
            Self::validate_record(&manifest, &rec)?;
            records.push(rec);
        }
        if records.len() != manifest.requests {
            return Err(Error::Dataset(format!(
                "manifest declares {} requests, file holds {}",
                manifest.requests,
                records.len()
            )));
        }
        Ok(Self { manifest, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Leading `1 - holdout` fraction for training, the rest held out.
    pub fn split(&self, holdout: f64) -> (&[Record], &[Record]) {
        let test = ((self.records.len() as f64) * holdout).round() as usize;
        let test = test.min(self.records.len());
        self.records.split_at(self.records.len() - test)
    }
}

/// Shuffled mini-batches; the order is a pure function of `(seed, epoch)`.
/// The final partial batch is kept.
pub fn batches(records: &[Record], batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Vec<&Record>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Shuffle, epoch));
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |c| c.into_iter().map(|i| &records[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_requests: 3,
            catalog_size: 30,
            n: 6,
            m: 3,
            d_u: 2,
            d_x: 3,
            seed,
            ..Default::default()
        }
    }

    fn to_bytes(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        buf
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(4)).unwrap();
        let b = generate_synthetic(&small(4)).unwrap();
        assert_eq!(to_bytes(&a), to_bytes(&b));
        assert_ne!(to_bytes(&a), to_bytes(&generate_synthetic(&small(5)).unwrap()));
    }

    #[test]
    fn noiseless_policy_exposes_affinity_top_m() {
        let cfg = SynthConfig {
            noise: 0.0,
            num_requests: 50,
            ..small(9)
        };
        let d = generate_synthetic(&cfg).unwrap();
        let mut rng = stream(cfg.seed, Stream::Data);
        let world = LatentWorld::sample(cfg.d_u, cfg.d_x, &mut rng);
        for r in &d.records {
            let mut aff: Vec<(f64, u64)> = r
                .request
                .candidates
                .iter()
                .map(|c| (world.affinity(&r.request.user, &c.x), c.id))
                .collect();
            aff.sort_by(|a, b| b.0.total_cmp(&a.0));
            let top: Vec<u64> = aff.iter().take(cfg.m).map(|a| a.1).collect();
            assert_eq!(top, r.outcome.exposed);
            assert!(r.outcome.labels.iter().all(|l| l[0] == 1));
        }
    }

    #[test]
    fn neutral_click_rate_is_one_half() {
        let mut rng = stream(17, Stream::Data);
        let n = 10_000;
        let clicks: usize = (0..n).map(|_| sample_labels(0.0, 0.0, &mut rng)[1] as usize).sum();
        let p = clicks as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() <= 3.0 * sigma, "click rate {p}");
    }

    #[test]
    fn position_bias_is_linear_and_decreasing() {
        assert_eq!(position_bias(3, 0.5), vec![0.5, 0.0, -0.5]);
        assert_eq!(position_bias(1, 0.5), vec![0.0]);
    }

    #[test]
    fn round_trip_is_exact() {
        let d = generate_synthetic(&small(1)).unwrap();
        let back = Dataset::read(&to_bytes(&d)[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn manifest_keys_are_exact() {
        let d = generate_synthetic(&small(1)).unwrap();
        let bytes = to_bytes(&d);
        let head = bytes.split(|&b| b == b'\n').next().unwrap();
        assert_eq!(
            std::str::from_utf8(head).unwrap(),
            r#"{"version":1,"requests":3,"catalog":30,"n":6,"m":3,"k":3,"d_u":2,"d_x":3,"seed":1}"#
        );
    }

    #[test]
    fn load_rejects_foreign_exposed_item() {
        let mut d = generate_synthetic(&small(1)).unwrap();
        d.records[1].outcome.exposed[0] = 9_999;
        let err = Dataset::read(&to_bytes(&d)[..]).unwrap_err().to_string();
        assert!(err.contains("request 1") && err.contains("9999"), "{err}");
    }

    #[test]
    fn load_rejects_count_mismatch_and_bad_version() {
        let d = generate_synthetic(&small(1)).unwrap();
        let bytes = to_bytes(&d);
        let text = String::from_utf8(bytes).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        let err = Dataset::read(truncated.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("declares 3"), "{err}");
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        assert!(Dataset::read(bumped.as_bytes())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn batching_covers_every_record_once() {
        let d = generate_synthetic(&SynthConfig {
            num_requests: 23,
            ..small(2)
        })
        .unwrap();
        let ids = |e| {
            batches(&d.records, 5, 3, e)
                .flat_map(|b| b.into_iter().map(|r| r.request.request_id))
                .collect::<Vec<_>>()
        };
        let mut all = ids(0);
        assert_eq!(all, ids(0));
        assert_eq!(batches(&d.records, 5, 3, 0).count(), 5);
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        assert_eq!(batches(&d.records, 100, 3, 0).count(), 1);
    }
}
