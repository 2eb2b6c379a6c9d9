//! Synthetic group-structured classification data, non-IID partitioning and
//! label-flip poisoning.
//!
//! Every sample of group `g` and class `c` is drawn around
//! `group_means[g][c] * prototype_c + code_g`, plus isotropic Gaussian noise.
//! The class prototypes and group codes depend only on the [`SynthSpec`], so
//! datasets drawn with different seeds from the same spec share one geometry.
//! Group codes are non-zero on an `attr_leak` fraction of the coordinates and
//! are orthogonal to the class prototypes.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    /// Class index, `0..C`.
    pub y: usize,
    /// Sensitive group index, `0..G`.
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub samples_per_group: Vec<usize>,
    /// `G x C` scale of each class prototype within each group.
    pub group_means: Vec<Vec<f64>>,
    pub noise_std: f64,
    /// Fraction of coordinates that carry the group code.
    pub attr_leak: f64,
    /// Per-group probability of replacing the label with a different class.
    pub label_flip_noise: Vec<f64>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            input_dim: 20,
            num_classes: 2,
            num_groups: 4,
            samples_per_group: vec![2000, 1500, 1000, 500],
            group_means: vec![
                vec![1.0, 1.0],
                vec![1.0, 1.0],
                vec![0.8, 0.8],
                vec![0.6, 0.6],
            ],
            noise_std: 1.0,
            attr_leak: 0.5,
            label_flip_noise: vec![0.0, 0.0, 0.05, 0.1],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("data: {m}")));
        if self.input_dim == 0 || self.num_classes < 2 || self.num_groups == 0 {
            return bad("input_dim >= 1, num_classes >= 2 and num_groups >= 1 required");
        }
        if self.num_classes > 2 && self.input_dim < self.num_classes {
            return bad("input_dim must be >= num_classes");
        }
        if self.samples_per_group.len() != self.num_groups {
            return bad("samples_per_group must have num_groups entries");
        }
        if self.samples_per_group.iter().filter(|&&n| n > 0).count() < 2 {
            return bad("at least two groups need samples");
        }
        if self.group_means.len() != self.num_groups
            || self.group_means.iter().any(|r| r.len() != self.num_classes)
        {
            return bad("group_means must be num_groups x num_classes");
        }
        if self.group_means.iter().flatten().any(|v| !v.is_finite()) {
            return bad("group_means must be finite");
        }
        if !(self.noise_std > 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be > 0");
        }
        if !(0.0..=1.0).contains(&self.attr_leak) {
            return bad("attr_leak must be in [0, 1]");
        }
        if self.label_flip_noise.len() != self.num_groups
            || self.label_flip_noise.iter().any(|q| !(0.0..0.5).contains(q))
        {
            return bad("label_flip_noise must have num_groups entries in [0, 0.5)");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of this `SynthSpec`.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn geometry_seed(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serialises");
        let digest = Sha256::digest(json.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn total_samples(&self) -> usize {
        self.samples_per_group.iter().sum()
    }
}

fn normalise(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, bi)| *x -= c * bi);
    }
}

/// Class prototypes and group codes shared by every draw from one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub prototypes: Vec<Vec<f64>>,
    pub group_codes: Vec<Vec<f64>>,
    pub leak_coordinates: Vec<usize>,
}

impl Geometry {
    pub fn for_spec(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.geometry_seed());
        let gaussian = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };

        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
        if spec.num_classes == 2 {
            let mut m = gaussian(&mut rng);
            normalise(&mut m);
            let neg = m.iter().map(|v| -v).collect();
            prototypes.push(neg);
            prototypes.push(m);
        } else {
            for _ in 0..spec.num_classes {
                let mut v = gaussian(&mut rng);
                project_out(&mut v, &prototypes);
                normalise(&mut v);
                prototypes.push(v);
            }
        }
        // orthonormal basis of the class subspace
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for p in &prototypes {
            let mut v = p.clone();
            project_out(&mut v, &basis);
            if dot(&v, &v) > 1e-12 {
                normalise(&mut v);
                basis.push(v);
            }
        }

        let leak_count = (spec.attr_leak * d as f64).round() as usize;
        let mut coords: Vec<usize> = (0..d).collect();
        coords.shuffle(&mut rng);
        let mut leak_coordinates: Vec<usize> = coords[..leak_count].to_vec();
        leak_coordinates.sort_unstable();

        let group_codes = (0..spec.num_groups)
            .map(|_| {
                let mut code = vec![0.0; d];
                for &j in &leak_coordinates {
                    code[j] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
                if leak_count > 0 {
                    let norm = (leak_count as f64).sqrt();
                    project_out(&mut code, &basis);
                    normalise(&mut code);
                    code.iter_mut().for_each(|v| *v *= norm);
                }
                code
            })
            .collect();

        Ok(Self {
            prototypes,
            group_codes,
            leak_coordinates,
        })
    }
}

/// Draws `spec.samples_per_group[g]` samples for every group, groups in order.
pub fn generate_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<Sample>> {
    let geometry = Geometry::for_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim;
    let mut out = Vec::with_capacity(spec.total_samples());
    for (g, &count) in spec.samples_per_group.iter().enumerate() {
        for _ in 0..count {
            let class = rng.random_range(0..spec.num_classes);
            let scale = spec.group_means[g][class];
            let x: Vec<f64> = (0..d)
                .map(|j| {
                    let noise: f64 = rng.sample(StandardNormal);
                    scale * geometry.prototypes[class][j]
                        + geometry.group_codes[g][j]
                        + spec.noise_std * noise
                })
                .collect();
            let mut y = class;
            if rng.random::<f64>() < spec.label_flip_noise[g] {
                let shift = rng.random_range(1..spec.num_classes);
                y = (class + shift) % spec.num_classes;
            }
            out.push(Sample { x, y, s: g });
        }
    }
    Ok(out)
}

fn dirichlet_proportions<R: Rng + ?Sized>(k: usize, beta: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta > 0");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Splits `dataset` into `k` shards with per-group client proportions drawn
/// from `Dirichlet(beta)`. Shards keep the dataset's sample order.
pub fn partition(dataset: &[Sample], k: usize, beta: f64, seed: u64) -> Result<Vec<Vec<Sample>>> {
    if k == 0 {
        return Err(Error::Config("number of clients must be >= 1".into()));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config("partition beta must be > 0".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset".into()));
    }
    if k == 1 {
        return Ok(vec![dataset.to_vec()]);
    }
    let num_groups = dataset.iter().map(|s| s.s).max().expect("non-empty") + 1;
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for (i, s) in dataset.iter().enumerate() {
        by_group[s.s].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _attempt in 0..=10 {
        let mut owner = vec![0usize; dataset.len()];
        let mut sizes = vec![0usize; k];
        for members in &by_group {
            if members.is_empty() {
                continue;
            }
            let mut idx = members.clone();
            idx.shuffle(&mut rng);
            let props = dirichlet_proportions(k, beta, &mut rng);
            let mut start = 0;
            let mut cumulative = 0.0;
            for (client, p) in props.iter().enumerate() {
                cumulative += p;
                let end = if client + 1 == k {
                    idx.len()
                } else {
                    ((cumulative * idx.len() as f64).round() as usize).min(idx.len())
                };
                for &i in &idx[start..end.max(start)] {
                    owner[i] = client;
                    sizes[client] += 1;
                }
                start = end.max(start);
            }
        }
        if sizes.iter().all(|&n| n > 0) {
            let mut shards = vec![Vec::new(); k];
            for (i, s) in dataset.iter().enumerate() {
                shards[owner[i]].push(s.clone());
            }
            return Ok(shards);
        }
    }
    Err(Error::Config(format!(
        "partition left a client empty after 10 resamples (k={k}, beta={beta})"
    )))
}

/// Appends `round(rate * |shard|)` clones of `target_group` samples with
/// labels moved to a different class.
///
/// Clones are drawn from samples whose label is in `from_classes`, or from
/// every label when it is empty. Sourcing from the favourable class makes the
/// injected data push the target group's true-positive rate down.
pub fn poison(
    shard: &[Sample],
    target_group: usize,
    rate: f64,
    num_classes: usize,
    from_classes: &[usize],
    seed: u64,
) -> Result<Vec<Sample>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Domain(format!("poisoning rate {rate} not in [0, 1]")));
    }
    if num_classes < 2 {
        return Err(Error::Domain("poisoning needs at least two classes".into()));
    }
    let pool: Vec<&Sample> = shard
        .iter()
        .filter(|s| s.s == target_group && (from_classes.is_empty() || from_classes.contains(&s.y)))
        .collect();
    if pool.is_empty() {
        return Err(Error::Empty(format!(
            "shard has no samples of group {target_group} with a source label"
        )));
    }
    let count = (rate * shard.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = shard.to_vec();
    out.reserve(count);
    for _ in 0..count {
        let src = pool[rng.random_range(0..pool.len())];
        let shift = rng.random_range(1..num_classes);
        out.push(Sample {
            x: src.x.clone(),
            y: (src.y + shift) % num_classes,
            s: target_group,
        });
    }
    Ok(out)
}

/// One line per sample: `x_0,..,x_{d-1},y,s`, floats with 9 significant
/// digits, preceded by a `# spec_hash=` header.
pub fn write_dataset<W: Write>(mut w: W, spec: &SynthSpec, samples: &[Sample]) -> std::io::Result<()> {
    writeln!(w, "# spec_hash={}", spec.hash())?;
    let mut line = String::new();
    for s in samples {
        line.clear();
        for v in &s.x {
            line.push_str(&format!("{v:.8e},"));
        }
        line.push_str(&format!("{},{}", s.y, s.s));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses the format written by [`write_dataset`]; returns the header hash.
pub fn read_dataset<R: BufRead>(r: R) -> Result<(String, Vec<Sample>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("missing header".into()))?
        .map_err(|e| Error::Parse(e.to_string()))?;
    let hash = header
        .strip_prefix("# spec_hash=")
        .ok_or_else(|| Error::Parse(format!("bad header: {header}")))?
        .to_string();
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::Parse(e.to_string()))?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse(format!("line {}: too few fields", n + 2)));
        }
        let parse_err = |f: &str| Error::Parse(format!("line {}: bad field {f:?}", n + 2));
        let (xs, labels) = fields.split_at(fields.len() - 2);
        let x = xs
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err(f)))
            .collect::<Result<Vec<_>>>()?;
        let y = labels[0].parse().map_err(|_| parse_err(labels[0]))?;
        let s = labels[1].parse().map_err(|_| parse_err(labels[1]))?;
        samples.push(Sample { x, y, s });
    }
    Ok((hash, samples))
}
