//! Domain model for user histories and interleaved sequences, plus a
//! synthetic position-biased click generator and event-log file I/O.
//!
//! A user history is a time-ordered list of (impression, action) pairs under
//! a static profile. The model consumes the interleaved token form
//! `[static...; I_1, A_1; I_2, A_2; ...; I_L]`, where each action token
//! carries the post-scoring context (position bucket) and the realized label,
//! and the final impression may be unlabeled when it is a scoring target.

use crate::error::{Error, Result};
use crate::parallel::map_indexed;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Session labels are derived from timestamp gaps; two consecutive events
/// further apart than this belong to different sessions.
pub const DEFAULT_SESSION_GAP_MS: i64 = 1_800_000;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Static,
    Impression,
    Action,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub ad_id: u64,
    pub request_features: Vec<u32>,
    pub timestamp_ms: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextualizedAction {
    /// Bucket in `1..=K` derived from `raw_position` via the configured
    /// boundaries.
    pub context_bucket: u32,
    pub raw_position: u32,
    /// Binary click label.
    pub action_label: u8,
    /// Auxiliary targets: `[long_dwell_indicator, log_dwell_seconds]`.
    pub aux_labels: Vec<f64>,
    /// Shares the impression's timestamp.
    pub timestamp_ms: i64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserHistory {
    pub user_id: u64,
    pub static_features: Vec<u32>,
    /// Time-ordered; only the final impression may lack its action.
    pub events: Vec<(Impression, Option<ContextualizedAction>)>,
}

impl UserHistory {
    pub fn validate(&self) -> Result<()> {
        let mut prev_ts = i64::MIN;
        for (idx, (imp, action)) in self.events.iter().enumerate() {
            if imp.timestamp_ms <= 0 {
                return Err(Error::Ordering(format!(
                    "user {}: impression {idx} has non-positive timestamp",
                    self.user_id
                )));
            }
            if imp.timestamp_ms < prev_ts {
                return Err(Error::Ordering(format!(
                    "user {}: impression {idx} out of order ({} after {})",
                    self.user_id, imp.timestamp_ms, prev_ts
                )));
            }
            prev_ts = imp.timestamp_ms;
            match action {
                Some(a) => {
                    if a.timestamp_ms != imp.timestamp_ms {
                        return Err(Error::Ordering(format!(
                            "user {}: action {idx} timestamp differs from its impression",
                            self.user_id
                        )));
                    }
                    if a.action_label > 1 {
                        return Err(Error::Ordering(format!(
                            "user {}: action {idx} label must be 0 or 1",
                            self.user_id
                        )));
                    }
                }
                None => {
                    if idx + 1 != self.events.len() {
                        return Err(Error::Ordering(format!(
                            "user {}: only the final impression may be unlabeled (event {idx})",
                            self.user_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn impression_count(&self) -> usize {
        self.events.len()
    }
}

/// `k = 1 + |{b in boundaries : raw_position > b}|`; monotone in the
/// position, with `len(boundaries) + 1` buckets total.
pub fn bucketize_position(raw_position: u32, boundaries: &[u32]) -> u32 {
    debug_assert!(raw_position >= 1);
    debug_assert!(!boundaries.is_empty());
    debug_assert!(boundaries.windows(2).all(|w| w[0] < w[1]));
    1 + boundaries.iter().filter(|&&b| raw_position > b).count() as u32
}

#[derive(Clone, Debug, PartialEq)]
pub enum TokenPayload {
    Static {
        feature: u64,
    },
    Impression {
        ad_id: u64,
        request_features: Vec<u32>,
    },
    Action {
        click: u8,
        context_bucket: u32,
        raw_position: u32,
        aux_labels: Vec<f64>,
    },
    Pad,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqToken {
    pub payload: TokenPayload,
    pub timestamp_ms: i64,
    pub session_id: u32,
}

impl SeqToken {
    pub fn kind(&self) -> TokenKind {
        match self.payload {
            TokenPayload::Static { .. } => TokenKind::Static,
            TokenPayload::Impression { .. } => TokenKind::Impression,
            TokenPayload::Action { .. } => TokenKind::Action,
            TokenPayload::Pad => TokenKind::Pad,
        }
    }

    pub fn pad() -> SeqToken {
        SeqToken {
            payload: TokenPayload::Pad,
            timestamp_ms: 0,
            session_id: 0,
        }
    }
}

/// Interleaved token form of one user history.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedSequence {
    pub user_id: u64,
    pub tokens: Vec<SeqToken>,
    /// Token position of each impression, by impression ordinal.
    pub impression_positions: Vec<usize>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Impression ordinal at a token position, if that token is an
    /// impression.
    pub fn impression_ordinal(&self, token_pos: usize) -> Option<usize> {
        self.impression_positions
            .binary_search(&token_pos)
            .ok()
    }

    pub fn kinds(&self) -> Vec<TokenKind> {
        self.tokens.iter().map(|t| t.kind()).collect()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.tokens.iter().map(|t| t.timestamp_ms).collect()
    }

    /// For each action token, the position of its own impression token.
    pub fn action_pairs(&self) -> Vec<Option<u32>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(pos, t)| match t.payload {
                TokenPayload::Action { .. } => Some(pos as u32 - 1),
                _ => None,
            })
            .collect()
    }
}

/// Build the interleaved token sequence `[static...; I_1, A_1; ...; I_L]`.
/// Static tokens inherit the first event's timestamp so rotary angles stay
/// inside the lookback window. Session ids are derived from timestamp gaps
/// and are metadata only; the model side never consumes them.
pub fn interleave(history: &UserHistory) -> Result<InterleavedSequence> {
    history.validate()?;
    let first_ts = history
        .events
        .first()
        .map(|(imp, _)| imp.timestamp_ms)
        .unwrap_or(0);

    let mut tokens = Vec::with_capacity(history.static_features.len() + 2 * history.events.len());
    for &f in &history.static_features {
        tokens.push(SeqToken {
            payload: TokenPayload::Static { feature: f as u64 },
            timestamp_ms: first_ts,
            session_id: 0,
        });
    }

    let mut impression_positions = Vec::with_capacity(history.events.len());
    let mut session_id = 0u32;
    let mut prev_ts: Option<i64> = None;
    for (imp, action) in &history.events {
        if let Some(p) = prev_ts {
            if imp.timestamp_ms - p > DEFAULT_SESSION_GAP_MS {
                session_id += 1;
            }
        }
        prev_ts = Some(imp.timestamp_ms);

        impression_positions.push(tokens.len());
        tokens.push(SeqToken {
            payload: TokenPayload::Impression {
                ad_id: imp.ad_id,
                request_features: imp.request_features.clone(),
            },
            timestamp_ms: imp.timestamp_ms,
            session_id,
        });
        if let Some(a) = action {
            tokens.push(SeqToken {
                payload: TokenPayload::Action {
                    click: a.action_label,
                    context_bucket: a.context_bucket,
                    raw_position: a.raw_position,
                    aux_labels: a.aux_labels.clone(),
                },
                timestamp_ms: a.timestamp_ms,
                session_id,
            });
        }
    }

    Ok(InterleavedSequence {
        user_id: history.user_id,
        tokens,
        impression_positions,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Configuration of the synthetic position-biased click generator.
///
/// Click probability per impression is
/// `clamp(base_ctr[cluster] * affinity * mood * position_bias[bucket], 0, 1)`
/// where affinity is a per-(user, cluster) multiplier from latent vectors,
/// drifting slowly across sessions, and mood is a per-session multiplier.
/// Both have unit expectation in the ratio sense, so empirical CTR ratios
/// between buckets converge to the configured bias ratios.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub n_users: usize,
    /// Inclusive range of impressions per user.
    pub impressions_per_user: (usize, usize),
    /// Inclusive range of impressions per session.
    pub impressions_per_session: (usize, usize),
    /// Gap range between consecutive impressions inside a session (ms).
    pub within_session_gap_ms: (i64, i64),
    /// Gap range between sessions (ms); should dwarf the within-session gaps.
    pub between_session_gap_ms: (i64, i64),
    /// Base click rate per ad cluster.
    pub base_ctr: Vec<f64>,
    /// Multiplier per context bucket; length must be `boundaries.len() + 1`.
    pub position_bias: Vec<f64>,
    pub bucket_boundaries: Vec<u32>,
    /// Raw positions are drawn uniformly from `1..=n_positions`.
    pub n_positions: u32,
    pub affinity_dim: usize,
    pub affinity_sigma: f64,
    /// Per-session log-normal mood scale; makes in-session labels correlate.
    pub session_mood_sigma: f64,
    /// Per-session random-walk scale of the user latent vector.
    pub affinity_drift: f64,
    pub ads_per_cluster: usize,
    pub request_feature_vocab: u32,
    pub n_static_features: usize,
    pub static_vocab: u32,
    /// Dwell threshold for the long-dwell auxiliary label, in seconds.
    pub long_dwell_threshold_s: f64,
    /// Every user's last event is anchored shortly before this instant.
    pub end_ts_ms: i64,
    pub end_jitter_ms: i64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 100,
            impressions_per_user: (12, 28),
            impressions_per_session: (2, 6),
            within_session_gap_ms: (10_000, 300_000),
            between_session_gap_ms: (7_200_000, 172_800_000),
            base_ctr: vec![0.03, 0.05, 0.07, 0.09, 0.11, 0.13, 0.16, 0.20],
            position_bias: vec![2.0, 1.0],
            bucket_boundaries: vec![4],
            n_positions: 8,
            affinity_dim: 4,
            affinity_sigma: 0.6,
            session_mood_sigma: 0.4,
            affinity_drift: 0.15,
            ads_per_cluster: 64,
            request_feature_vocab: 8,
            n_static_features: 2,
            static_vocab: 16,
            long_dwell_threshold_s: 30.0,
            end_ts_ms: 1_700_000_000_000,
            end_jitter_ms: 172_800_000,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Config("generator needs at least one user".into()));
        }
        for &p in &self.base_ctr {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("base_ctr {p} outside [0, 1]")));
            }
        }
        if self.base_ctr.is_empty() {
            return Err(Error::Config("base_ctr must not be empty".into()));
        }
        for &m in &self.position_bias {
            if m <= 0.0 {
                return Err(Error::Config(format!("position bias {m} must be > 0")));
            }
        }
        if self.position_bias.len() != self.bucket_boundaries.len() + 1 {
            return Err(Error::Config(format!(
                "{} position-bias entries for {} boundaries; need boundaries + 1",
                self.position_bias.len(),
                self.bucket_boundaries.len()
            )));
        }
        if self.bucket_boundaries.is_empty()
            || self.bucket_boundaries.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "bucket boundaries must be non-empty and strictly increasing".into(),
            ));
        }
        if self.impressions_per_user.0 == 0 || self.impressions_per_user.0 > self.impressions_per_user.1
        {
            return Err(Error::Config("bad impressions_per_user range".into()));
        }
        if self.n_positions == 0 {
            return Err(Error::Config("n_positions must be >= 1".into()));
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.base_ctr.len()
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Deterministic synthetic histories: per-user RNG streams are derived from
/// `(seed, user_id)`, so generation parallelizes without changing output.
pub fn generate(config: &GeneratorConfig) -> Result<Vec<UserHistory>> {
    config.validate()?;
    let dim = config.affinity_dim.max(1);

    // cluster latent vectors shared by all users; the salt keeps this stream
    // disjoint from the per-user streams
    let mut cluster_rng =
        ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ 0xA5A5_5A5A_DEAD_BEEF));
    let clusters: Vec<Vec<f64>> = (0..config.n_clusters())
        .map(|_| (0..dim).map(|_| normal(&mut cluster_rng)).collect())
        .collect();

    let histories = map_indexed(config.n_users, |u| {
        generate_user(config, &clusters, u as u64)
    });
    Ok(histories)
}

fn generate_user(config: &GeneratorConfig, clusters: &[Vec<f64>], user_id: u64) -> UserHistory {
    let dim = config.affinity_dim.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed ^ splitmix64(user_id)));

    let static_features: Vec<u32> = (0..config.n_static_features)
        .map(|_| rng.random_range(0..config.static_vocab))
        .collect();
    let mut latent: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();

    let n_impressions =
        rng.random_range(config.impressions_per_user.0..=config.impressions_per_user.1);

    let mut ts: i64 = 1; // shifted to the anchor afterwards
    let mut events = Vec::with_capacity(n_impressions);
    let mut left = n_impressions;
    while left > 0 {
        let in_session = rng
            .random_range(config.impressions_per_session.0..=config.impressions_per_session.1)
            .min(left);
        let mood = (config.session_mood_sigma * normal(&mut rng)).exp();
        for i in 0..in_session {
            if i > 0 || !events.is_empty() {
                let (lo, hi) = if i == 0 {
                    config.between_session_gap_ms
                } else {
                    config.within_session_gap_ms
                };
                ts += rng.random_range(lo..=hi).max(1);
            }
            let cluster = rng.random_range(0..config.n_clusters());
            let ad_id = (cluster * config.ads_per_cluster
                + rng.random_range(0..config.ads_per_cluster)) as u64;
            let device = rng.random_range(0..config.request_feature_vocab);
            let raw_position = rng.random_range(1..=config.n_positions);
            let bucket = bucketize_position(raw_position, &config.bucket_boundaries);

            let z: f64 = latent
                .iter()
                .zip(&clusters[cluster])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / (dim as f64).sqrt();
            let affinity = (config.affinity_sigma * z).exp();
            let p = (config.base_ctr[cluster]
                * affinity
                * mood
                * config.position_bias[(bucket - 1) as usize])
                .clamp(0.0, 1.0);
            let click = u8::from(rng.random_range(0.0..1.0) < p);

            let dwell_s = if click == 1 {
                (1.2 * normal(&mut rng) + 2.8).exp()
            } else {
                0.0
            };
            let long_dwell = f64::from(dwell_s > config.long_dwell_threshold_s);
            let aux_labels = vec![long_dwell, (1.0 + dwell_s).ln()];

            events.push((
                Impression {
                    ad_id,
                    request_features: vec![device],
                    timestamp_ms: ts,
                },
                Some(ContextualizedAction {
                    context_bucket: bucket,
                    raw_position,
                    action_label: click,
                    aux_labels,
                    timestamp_ms: ts,
                }),
            ));
        }
        left -= in_session;
        // user preference drifts between sessions
        for (l, _) in latent.iter_mut().zip(0..dim) {
            *l += config.affinity_drift * normal(&mut rng);
        }
    }

    // anchor the last event shortly before the configured end instant
    let jitter = if config.end_jitter_ms > 0 {
        rng.random_range(0..config.end_jitter_ms)
    } else {
        0
    };
    let last = events.last().map(|(i, _)| i.timestamp_ms).unwrap_or(1);
    let shift = config.end_ts_ms - jitter - last;
    for (imp, action) in &mut events {
        imp.timestamp_ms += shift;
        if let Some(a) = action {
            a.timestamp_ms += shift;
        }
    }

    UserHistory {
        user_id,
        static_features,
        events,
    }
}

// ---------------------------------------------------------------------------
// Event-log file I/O
// ---------------------------------------------------------------------------

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LogHeader {
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
struct LogEvent {
    ad_id: u64,
    request_features: Vec<u32>,
    timestamp_ms: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    raw_position: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    click: Option<u8>,
    aux_labels: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LogUser {
    user_id: u64,
    static_features: Vec<u32>,
    events: Vec<LogEvent>,
}

/// One user per line as JSON, after a schema-version header line.
pub fn write_log(path: impl AsRef<Path>, histories: &[UserHistory]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &LogHeader {
            schema_version: SCHEMA_VERSION,
        },
    )
    .map_err(|e| Error::Parse {
        line: 0,
        msg: e.to_string(),
    })?;
    w.write_all(b"\n")?;
    for h in histories {
        let record = LogUser {
            user_id: h.user_id,
            static_features: h.static_features.clone(),
            events: h
                .events
                .iter()
                .map(|(imp, action)| LogEvent {
                    ad_id: imp.ad_id,
                    request_features: imp.request_features.clone(),
                    timestamp_ms: imp.timestamp_ms,
                    raw_position: action.as_ref().map(|a| a.raw_position),
                    click: action.as_ref().map(|a| a.action_label),
                    aux_labels: action
                        .as_ref()
                        .map(|a| a.aux_labels.clone())
                        .unwrap_or_default(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &record).map_err(|e| Error::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Read an event log back; context buckets are reconstructed from raw
/// positions under the supplied boundaries.
pub fn read_log(path: impl AsRef<Path>, boundaries: &[u32]) -> Result<Vec<UserHistory>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (_, header_line) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file, expected schema header".into(),
    })?;
    let header_line = header_line?;
    let header: LogHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "unsupported schema version {} (expected {})",
                header.schema_version, SCHEMA_VERSION
            ),
        });
    }

    let mut histories = Vec::new();
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LogUser = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        let events = record
            .events
            .into_iter()
            .map(|e| {
                let action = match (e.raw_position, e.click) {
                    (Some(pos), Some(click)) => Some(ContextualizedAction {
                        context_bucket: bucketize_position(pos, boundaries),
                        raw_position: pos,
                        action_label: click,
                        aux_labels: e.aux_labels.clone(),
                        timestamp_ms: e.timestamp_ms,
                    }),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Parse {
                            line: idx + 1,
                            msg: "raw_position and click must be present together".into(),
                        })
                    }
                };
                Ok((
                    Impression {
                        ad_id: e.ad_id,
                        request_features: e.request_features,
                        timestamp_ms: e.timestamp_ms,
                    },
                    action,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let history = UserHistory {
            user_id: record.user_id,
            static_features: record.static_features,
            events,
        };
        history.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        histories.push(history);
    }
    Ok(histories)
}
