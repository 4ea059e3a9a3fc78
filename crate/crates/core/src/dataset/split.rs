use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::rng::substream;
use crate::{Error, Result};

/// Train/validation/test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.5, val: 0.25, test: 0.25 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions {parts:?} must lie in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// `(round(train·n), round(val·n), remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, isize) {
        let train = (self.train * n as f64).round() as usize;
        let val = (self.val * n as f64).round() as usize;
        (train, val, n as isize - train as isize - val as isize)
    }
}

/// Partition of qualified sample ids into train, validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub fractions: SplitFractions,
    pub seed: u64,
}

/// Stratified split. Samples are grouped by source and by count quartile
/// within that source; each group is shuffled and the concatenated groups
/// are dealt to the three parts so that every prefix stays proportional.
pub fn make_split(samples: &[ImageSample], fractions: SplitFractions, seed: u64) -> Result<SplitPlan> {
    fractions.validate()?;
    let n = samples.len();
    let (n_train, n_val, n_test) = fractions.sizes(n);
    if n < 4 || n_train == 0 || n_val == 0 || n_test <= 0 {
        return Err(Error::Split(format!(
            "{n} samples cannot populate train/val/test with fractions {:?}",
            [fractions.train, fractions.val, fractions.test]
        )));
    }
    let ids: Vec<String> = samples.iter().map(ImageSample::qualified_id).collect();
    if ids.iter().collect::<HashSet<_>>().len() != n {
        return Err(Error::Split("qualified sample ids are not unique".into()));
    }

    let mut order: Vec<usize> = Vec::with_capacity(n);
    for (stratum, mut members) in strata(samples) {
        members.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let mut rng = substream(seed, &[stratum.0, stratum.1 as u64]);
        members.shuffle(&mut rng);
        order.extend(members);
    }

    let targets = [n_train, n_val, n_test as usize];
    let mut assigned = [0usize; 3];
    let mut parts: [Vec<String>; 3] = Default::default();
    for (i, &idx) in order.iter().enumerate() {
        // Largest deficit against the proportional quota wins; ties go to
        // the earlier part.
        let pos = (i + 1) as f64;
        let deficit = |p: usize| pos * targets[p] as f64 / n as f64 - assigned[p] as f64;
        let part = (0..3)
            .filter(|&p| assigned[p] < targets[p])
            .max_by(|&a, &b| deficit(a).partial_cmp(&deficit(b)).unwrap().then(b.cmp(&a)))
            .expect("remaining capacity");
        assigned[part] += 1;
        parts[part].push(ids[idx].clone());
    }
    let [train_ids, val_ids, test_ids] = parts;
    Ok(SplitPlan { train_ids, val_ids, test_ids, fractions, seed })
}

/// `(source index, count quartile bin) → member indices`, ordered.
fn strata(samples: &[ImageSample]) -> BTreeMap<(u64, u8), Vec<usize>> {
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_source.entry(s.source_id.as_str()).or_default().push(i);
    }
    let mut out = BTreeMap::new();
    for (source_idx, members) in by_source.values().enumerate() {
        let mut counts: Vec<u32> = members.iter().map(|&i| samples[i].count).collect();
        counts.sort_unstable();
        let quartiles = [25.0, 50.0, 75.0].map(|p| nearest_rank(&counts, p));
        for &i in members {
            let bin = quartiles.iter().filter(|&&q| samples[i].count > q).count() as u8;
            out.entry((source_idx as u64, bin)).or_insert_with(Vec::new).push(i);
        }
    }
    out
}

fn nearest_rank(sorted: &[u32], pct: f64) -> u32 {
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl SplitPlan {
    /// Materializes the three parts, in plan order.
    pub fn select(&self, samples: &[ImageSample]) -> Result<[Vec<ImageSample>; 3]> {
        let by_id: HashMap<String, &ImageSample> = samples.iter().map(|s| (s.qualified_id(), s)).collect();
        let pick = |ids: &[String]| -> Result<Vec<ImageSample>> {
            ids.iter()
                .map(|id| {
                    by_id.get(id).map(|s| (*s).clone()).ok_or_else(|| Error::Split(format!("sample `{id}` not in collection")))
                })
                .collect()
        };
        Ok([pick(&self.train_ids)?, pick(&self.val_ids)?, pick(&self.test_ids)?])
    }

    /// Audit text: a comment line, then `[train]`, `[val]`, `[test]`
    /// sections with one id per line.
    pub fn to_text(&self) -> String {
        let f = &self.fractions;
        let mut out = format!("# split seed={} fractions={},{},{}\n", self.seed, f.train, f.val, f.test);
        for (name, ids) in [("train", &self.train_ids), ("val", &self.val_ids), ("test", &self.test_ids)] {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let (seed, fractions) = parse_header(header).ok_or_else(|| Error::Split("malformed split header".into()))?;
        let mut parts: [Vec<String>; 3] = Default::default();
        let mut current = None;
        for line in lines {
            match line {
                "[train]" => current = Some(0),
                "[val]" => current = Some(1),
                "[test]" => current = Some(2),
                "" => {}
                id => match current {
                    Some(p) => parts[p].push(id.to_string()),
                    None => return Err(Error::Split(format!("id `{id}` outside a section"))),
                },
            }
        }
        let [train_ids, val_ids, test_ids] = parts;
        Ok(Self { train_ids, val_ids, test_ids, fractions, seed })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_header(line: &str) -> Option<(u64, SplitFractions)> {
    let rest = line.strip_prefix("# split seed=")?;
    let (seed, fr) = rest.split_once(" fractions=")?;
    let f: Vec<f64> = fr.split(',').map(|v| v.parse().ok()).collect::<Option<_>>()?;
    let [train, val, test] = f[..] else { return None };
    Some((seed.parse().ok()?, SplitFractions { train, val, test }))
}

/// Disjoint, near-equal parts (sizes differ by at most one). Samples are
/// shuffled, ordered by source and count, and dealt round-robin so every
/// part sees a similar mix. `k = 1` returns the input unchanged.
pub fn partition_equal(samples: &[ImageSample], k: usize, seed: u64) -> Result<Vec<Vec<ImageSample>>> {
    if k == 0 {
        return Err(Error::Partition("k must be at least 1".into()));
    }
    if k > samples.len() {
        return Err(Error::Partition(format!("cannot split {} samples into {k} non-empty parts", samples.len())));
    }
    if k == 1 {
        return Ok(vec![samples.to_vec()]);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by_key(|&i| samples[i].qualified_id());
    order.shuffle(&mut substream(seed, &[0x5041_5254]));
    order.sort_by(|&a, &b| {
        (samples[a].source_id.as_str(), samples[a].count).cmp(&(samples[b].source_id.as_str(), samples[b].count))
    });
    let mut parts = vec![Vec::with_capacity(samples.len() / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        parts[pos % k].push(samples[idx].clone());
    }
    Ok(parts)
}
