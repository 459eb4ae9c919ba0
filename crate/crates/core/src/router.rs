//! Router behaviour metrics on routing logs: saturation against a final
//! checkpoint, change rate between consecutive checkpoints, and Jain's
//! fairness index of expert utilization.
//!
//! Logs are flat CSV files with rows `checkpoint,token,e1|e2|...|ek`; an
//! optional header row starting with `checkpoint` is skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activated expert sets for every token at every checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLog {
    k: usize,
    num_experts: usize,
    num_tokens: usize,
    /// Checkpoint ids in increasing order.
    checkpoints: Vec<u64>,
    /// `sets[c][i]` is the sorted expert set of token `i` at checkpoint `c`.
    sets: Vec<Vec<Vec<usize>>>,
}

impl RoutingLog {
    /// Builds a log from `(checkpoint, token, experts)` entries. Token ids
    /// must be `0..N` at every checkpoint, each set must have `k` distinct
    /// ids below `num_experts`.
    pub fn new(k: usize, num_experts: usize, entries: impl IntoIterator<Item = (u64, usize, Vec<usize>)>) -> Result<Self> {
        if k == 0 || k > num_experts {
            return Err(Error::invalid("k", format!("need 1 <= k <= {num_experts}, got {k}")));
        }
        let mut by_checkpoint: BTreeMap<u64, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (c, token, experts) in entries {
            let set = validate_set(&experts, k, num_experts).map_err(|reason| Error::invalid("experts", reason))?;
            if by_checkpoint.entry(c).or_default().insert(token, set).is_some() {
                return Err(Error::invalid("token", format!("token {token} appears twice at checkpoint {c}")));
            }
        }
        Self::from_map(k, num_experts, by_checkpoint)
    }

    fn from_map(k: usize, num_experts: usize, map: BTreeMap<u64, BTreeMap<usize, Vec<usize>>>) -> Result<Self> {
        let Some(first) = map.values().next() else {
            return Err(Error::invalid("log", "routing log is empty"));
        };
        let num_tokens = first.len();
        let mut checkpoints = Vec::with_capacity(map.len());
        let mut sets = Vec::with_capacity(map.len());
        for (c, tokens) in map {
            if tokens.len() != num_tokens || tokens.keys().enumerate().any(|(i, &t)| i != t) {
                return Err(Error::invalid("log", format!("checkpoint {c} does not cover tokens 0..{num_tokens}")));
            }
            checkpoints.push(c);
            sets.push(tokens.into_values().collect());
        }
        Ok(RoutingLog {
            k,
            num_experts,
            num_tokens,
            checkpoints,
            sets,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn checkpoints(&self) -> &[u64] {
        &self.checkpoints
    }

    /// Sorted expert set of `token` at checkpoint `id`.
    pub fn experts(&self, id: u64, token: usize) -> Result<&[usize]> {
        let c = self.index_of(id)?;
        self.sets[c]
            .get(token)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid("token", format!("token {token} out of range 0..{}", self.num_tokens)))
    }

    fn index_of(&self, id: u64) -> Result<usize> {
        self.checkpoints.binary_search(&id).map_err(|_| Error::UnknownCheckpoint(id))
    }

    /// Reads a log; `num_experts` defaults to one more than the largest id
    /// seen, `k` is taken from the first row.
    pub fn read_csv(path: impl AsRef<Path>, num_experts: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.into(),
            line,
            reason,
        };
        let mut rows = Vec::new();
        let mut k = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let raw = raw.trim();
            if raw.is_empty() || (rows.is_empty() && raw.starts_with("checkpoint")) {
                continue;
            }
            let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(parse_err(line, format!("expected 3 fields, got {}", fields.len())));
            }
            let c: u64 = fields[0].parse().map_err(|_| parse_err(line, format!("bad checkpoint id {:?}", fields[0])))?;
            let t: usize = fields[1].parse().map_err(|_| parse_err(line, format!("bad token index {:?}", fields[1])))?;
            let experts = fields[2]
                .split('|')
                .map(|e| e.trim().parse::<usize>().map_err(|_| parse_err(line, format!("bad expert id {e:?}"))))
                .collect::<Result<Vec<_>>>()?;
            let k_row = *k.get_or_insert(experts.len());
            validate_set(&experts, k_row, usize::MAX).map_err(|reason| parse_err(line, reason))?;
            rows.push((line, c, t, experts));
        }
        let Some(k) = k else {
            return Err(parse_err(0, "routing log is empty".into()));
        };
        let largest = rows.iter().flat_map(|r| r.3.iter().copied()).max().unwrap_or(0);
        let num_experts = num_experts.unwrap_or(largest + 1);
        let mut map: BTreeMap<u64, BTreeMap<usize, Vec<usize>>> = BTreeMap::new();
        for (line, c, t, experts) in rows {
            let set = validate_set(&experts, k, num_experts).map_err(|reason| parse_err(line, reason))?;
            if map.entry(c).or_default().insert(t, set).is_some() {
                return Err(parse_err(line, format!("token {t} appears twice at checkpoint {c}")));
            }
        }
        Self::from_map(k, num_experts, map)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("checkpoint,token,experts\n");
        for (c, sets) in self.checkpoints.iter().zip(&self.sets) {
            for (t, set) in sets.iter().enumerate() {
                let ids: Vec<String> = set.iter().map(usize::to_string).collect();
                out.push_str(&format!("{c},{t},{}\n", ids.join("|")));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn validate_set(experts: &[usize], k: usize, num_experts: usize) -> std::result::Result<Vec<usize>, String> {
    if experts.len() != k {
        return Err(format!("expected {k} experts, got {}", experts.len()));
    }
    let set: BTreeSet<usize> = experts.iter().copied().collect();
    if set.len() != experts.len() {
        return Err(format!("duplicate expert id in {experts:?}"));
    }
    if let Some(&e) = set.iter().find(|&&e| e >= num_experts) {
        return Err(format!("expert id {e} out of range 0..{num_experts}"));
    }
    Ok(set.into_iter().collect())
}

fn overlap(a: &[usize], b: &[usize]) -> usize {
    // Both sorted.
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Mean fraction of each token's experts at checkpoint `t` that are also
/// active for it at checkpoint `final_id`.
pub fn saturation(log: &RoutingLog, t: u64, final_id: u64) -> Result<f64> {
    let (a, b) = (log.index_of(t)?, log.index_of(final_id)?);
    let total: usize = log.sets[a].iter().zip(&log.sets[b]).map(|(x, y)| overlap(x, y)).sum();
    Ok(total as f64 / (log.num_tokens * log.k) as f64)
}

/// Mean fraction of each token's experts at the checkpoint after `t` that
/// were not active for it at `t`.
pub fn change_rate(log: &RoutingLog, t: u64) -> Result<f64> {
    let a = log.index_of(t)?;
    if a + 1 == log.checkpoints.len() {
        return Err(Error::invalid("t", format!("checkpoint {t} is the last one")));
    }
    let total: usize = log.sets[a].iter().zip(&log.sets[a + 1]).map(|(x, y)| log.k - overlap(x, y)).sum();
    Ok(total as f64 / (log.num_tokens * log.k) as f64)
}

/// `(Σ rᵢ)² / (n Σ rᵢ²)`.
pub fn jain_index(r: &[f64]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::invalid("utilization", "vector is empty"));
    }
    if let Some(v) = r.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::invalid("utilization", format!("entries must be finite and nonnegative, got {v}")));
    }
    let sum: f64 = r.iter().sum();
    let sq: f64 = r.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return Err(Error::invalid("utilization", "all entries are zero"));
    }
    Ok(sum * sum / (r.len() as f64 * sq))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UtilizationMode {
    /// Share of tokens that activate each expert.
    Tokens,
    /// Share of routing weight; without recorded weights every activation
    /// carries weight `1/k`.
    Weight,
}

impl std::str::FromStr for UtilizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" | "token" => Ok(UtilizationMode::Tokens),
            "weight" => Ok(UtilizationMode::Weight),
            other => Err(Error::invalid("mode", format!("expected tokens or weight, got {other:?}"))),
        }
    }
}

/// Utilization vector of checkpoint `t`.
pub fn utilization(log: &RoutingLog, t: u64, mode: UtilizationMode) -> Result<Vec<f64>> {
    let c = log.index_of(t)?;
    let mut counts = vec![0.0; log.num_experts];
    for set in &log.sets[c] {
        for &e in set {
            counts[e] += 1.0;
        }
    }
    let denom = match mode {
        UtilizationMode::Tokens => log.num_tokens as f64,
        UtilizationMode::Weight => (log.num_tokens * log.k) as f64,
    };
    Ok(counts.into_iter().map(|v| v / denom).collect())
}

/// Metrics of one checkpoint: saturation against the last checkpoint,
/// change rate to the next one (absent for the last) and Jain's index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub checkpoint: u64,
    pub saturation: f64,
    pub change_rate: Option<f64>,
    pub jain: f64,
}

pub fn metric_curve(log: &RoutingLog, mode: UtilizationMode) -> Result<Vec<CheckpointMetrics>> {
    let last = *log.checkpoints.last().expect("non-empty log");
    log.checkpoints
        .iter()
        .map(|&c| {
            Ok(CheckpointMetrics {
                checkpoint: c,
                saturation: saturation(log, c, last)?,
                change_rate: if c == last { None } else { Some(change_rate(log, c)?) },
                jain: jain_index(&utilization(log, c, mode)?)?,
            })
        })
        .collect()
}

/// Writes a curve as `label,checkpoint,checkpoint_fraction,saturation,
/// change_rate,jain`; the change rate of the last checkpoint is left empty.
/// The fraction is the checkpoint id divided by the last id.
pub fn write_curve_csv(curve: &[CheckpointMetrics], label: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if label.contains(',') || label.contains('"') {
        return Err(Error::invalid("label", "label must not contain commas or quotes"));
    }
    let last = curve.last().map_or(0, |m| m.checkpoint);
    let mut out = String::from("label,checkpoint,checkpoint_fraction,saturation,change_rate,jain\n");
    for m in curve {
        let cr = m.change_rate.map(|v| format!("{v:.16e}")).unwrap_or_default();
        let frac = if last > 0 { m.checkpoint as f64 / last as f64 } else { 1.0 };
        out.push_str(&format!("{label},{},{frac:.16e},{:.16e},{cr},{:.16e}\n", m.checkpoint, m.saturation, m.jain));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Unweighted mean of a metric over per-layer values.
pub fn layer_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("values", "no layers"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn two_checkpoints(a: Vec<usize>, b: Vec<usize>) -> RoutingLog {
        RoutingLog::new(a.len(), 8, [(0, 0, a), (1, 0, b)]).unwrap()
    }

    #[test]
    fn saturation_examples() {
        let log = two_checkpoints(vec![1, 2], vec![1, 3]);
        assert_eq!(saturation(&log, 1, 1).unwrap(), 1.0);
        assert_eq!(saturation(&log, 0, 1).unwrap(), 0.5);
        let log = two_checkpoints(vec![1, 2], vec![3, 4]);
        assert_eq!(saturation(&log, 0, 1).unwrap(), 0.0);
        assert!(matches!(saturation(&log, 0, 7), Err(Error::UnknownCheckpoint(7))));
    }

    #[test]
    fn change_rate_examples() {
        assert_eq!(change_rate(&two_checkpoints(vec![1, 2], vec![2, 1]), 0).unwrap(), 0.0);
        assert_eq!(change_rate(&two_checkpoints(vec![1, 2], vec![3, 4]), 0).unwrap(), 1.0);
        assert_eq!(change_rate(&two_checkpoints(vec![1, 2], vec![1, 3]), 0).unwrap(), 0.5);
        assert!(change_rate(&two_checkpoints(vec![1, 2], vec![1, 3]), 1).is_err());
    }

    #[test]
    fn jain_examples() {
        assert_eq!(jain_index(&[0.3; 4]).unwrap(), 1.0);
        assert_eq!(jain_index(&[1.0, 0.0, 0.0]).unwrap(), 1.0 / 3.0);
        assert_eq!(jain_index(&[2.0, 1.0, 1.0]).unwrap(), 8.0 / 9.0);
        assert!(jain_index(&[0.0, 0.0]).is_err());
        assert!(jain_index(&[1.0, -1.0]).is_err());
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_row_format() {
        let f = write("checkpoint,token,experts\n3,0,9|8|5|1\n");
        let log = RoutingLog::read_csv(f.path(), Some(10)).unwrap();
        assert_eq!(log.k(), 4);
        assert_eq!(log.experts(3, 0).unwrap(), &[1, 5, 8, 9]);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let f = write("0,0,1|2\n0,1,1|1\n");
        match RoutingLog::read_csv(f.path(), None) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("duplicate"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
        let f = write("0,0,1|2\n0,1,1|2|3\n");
        assert!(matches!(RoutingLog::read_csv(f.path(), None), Err(Error::Parse { line: 2, .. })));
        let f = write("");
        assert!(matches!(RoutingLog::read_csv(f.path(), None), Err(Error::Parse { .. })));
        let f = write("0,0,1|2\n0,0,3|4\n");
        assert!(matches!(RoutingLog::read_csv(f.path(), None), Err(Error::Parse { line: 2, .. })));
        let f = write("0,0,1|2\n1,1,1|2\n");
        assert!(RoutingLog::read_csv(f.path(), None).is_err());
    }

    #[test]
    fn csv_round_trip_and_curve() {
        let log = RoutingLog::new(2, 4, [(0, 0, vec![0, 1]), (0, 1, vec![2, 3]), (5, 0, vec![0, 2]), (5, 1, vec![2, 3])]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        log.write_csv(f.path()).unwrap();
        assert_eq!(RoutingLog::read_csv(f.path(), Some(4)).unwrap(), log);
        let curve = metric_curve(&log, UtilizationMode::Tokens).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].saturation, 0.75);
        assert_eq!(curve[0].change_rate, Some(0.25));
        assert_eq!(curve[1].change_rate, None);
        assert_eq!(curve[0].jain, 1.0);
        assert_eq!(utilization(&log, 5, UtilizationMode::Weight).unwrap(), vec![0.25, 0.0, 0.5, 0.25]);
        write_curve_csv(&curve, "m", f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("m,0,0.0"));
        assert!(text.lines().last().unwrap().contains(",,"));
    }

    proptest! {
        #[test]
        fn jain_is_scale_invariant(r in prop::collection::vec(0.0f64..10.0, 1..20), c in 1e-3f64..1e3) {
            prop_assume!(r.iter().any(|&v| v > 0.0));
            let scaled: Vec<f64> = r.iter().map(|v| v * c).collect();
            let (a, b) = (jain_index(&r).unwrap(), jain_index(&scaled).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * a);
            prop_assert!(a >= 1.0 / r.len() as f64 - 1e-12 && a <= 1.0 + 1e-12);
        }

        #[test]
        fn metrics_ignore_expert_relabelling(seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut entries = Vec::new();
            for c in 0..3u64 {
                for t in 0..6 {
                    let mut ids: Vec<usize> = (0..6).collect();
                    ids.shuffle(&mut rng);
                    entries.push((c, t, ids[..2].to_vec()));
                }
            }
            let mut perm: Vec<usize> = (0..6).collect();
            perm.shuffle(&mut rng);
            let relabelled: Vec<_> = entries.iter().map(|(c, t, s)| (*c, *t, s.iter().map(|&e| perm[e]).collect())).collect();
            let a = RoutingLog::new(2, 6, entries).unwrap();
            let b = RoutingLog::new(2, 6, relabelled).unwrap();
            prop_assert_eq!(saturation(&a, 0, 2).unwrap(), saturation(&b, 0, 2).unwrap());
            prop_assert_eq!(change_rate(&a, 1).unwrap(), change_rate(&b, 1).unwrap());
        }
    }
}
