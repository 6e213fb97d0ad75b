use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Labelled samples with an optional even split across agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
    partition: Vec<Range<usize>>,
}

impl Dataset {
    /// Unpartitioned dataset; `features` is row-major with `d` columns and
    /// labels must be `+1` or `-1`.
    pub fn new(d: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("d", "feature dimension must be positive"));
        }
        if features.len() != labels.len() * d {
            return Err(Error::Dimension { expected: labels.len() * d, got: features.len() });
        }
        if let Some(b) = labels.iter().find(|b| **b != 1.0 && **b != -1.0) {
            return Err(Error::domain("label", format!("expected +1 or -1, got {b}")));
        }
        let len = labels.len();
        Ok(Self { d, features, labels, partition: vec![0..len] })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn agents(&self) -> usize {
        self.partition.len()
    }

    pub fn partition(&self) -> &[Range<usize>] {
        &self.partition
    }

    /// Samples owned by `agent`.
    pub fn local(&self, agent: usize) -> Range<usize> {
        self.partition[agent].clone()
    }

    /// Shuffles the samples with `seed` and deals `q = len / n` to each agent.
    /// The remaining `len mod n` samples are dropped.
    pub fn partition_evenly(&self, n: usize, seed: u64) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::domain("n", format!("cannot split {} samples across {n} agents", self.len())));
        }
        let q = self.len() / n;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream(seed, 0, 0, Purpose::Partition));
        order.truncate(n * q);
        let mut features = Vec::with_capacity(n * q * self.d);
        let mut labels = Vec::with_capacity(n * q);
        for &i in &order {
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        let partition = (0..n).map(|a| a * q..(a + 1) * q).collect();
        Ok(Self { d: self.d, features, labels, partition })
    }

    /// Per-agent sample count, if the partition is even.
    pub fn local_size(&self) -> Option<usize> {
        let q = self.partition.first()?.len();
        self.partition.iter().all(|r| r.len() == q).then_some(q)
    }
}

/// Reproducibility record for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub q: usize,
    pub d: usize,
    pub seed: u64,
    pub source: String,
}

/// Parameters of the synthetic logistic-regression generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub q: usize,
    pub d: usize,
    /// Label sharpness: `P(b = sign(a.w)) = sigmoid(margin |a.w|)`. Infinite
    /// margin gives noiseless labels before flipping.
    pub margin: f64,
    /// Probability of flipping each label afterwards.
    pub flip_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Planted separating direction, drawn with `N(0, I)` coordinates.
    pub fn planted_weights(&self) -> Vec<f64> {
        let mut rng = stream(self.seed, u64::MAX, 0, Purpose::Dataset);
        (0..self.d).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Gaussian features with `N(0, 1/d)` coordinates and labels from a planted
/// linear model, already split evenly across `n` agents.
pub fn synthetic_logistic_data(spec: &SyntheticSpec) -> Dataset {
    let SyntheticSpec { n, q, d, margin, flip_rate, seed } = *spec;
    let w = spec.planted_weights();
    let scale = 1.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(n * q * d);
    let mut labels = Vec::with_capacity(n * q);
    for agent in 0..n {
        let mut rng = stream(seed, agent as u64, 0, Purpose::Dataset);
        for _ in 0..q {
            let start = features.len();
            features.extend((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)));
            let z: f64 = features[start..].iter().zip(&w).map(|(a, b)| a * b).sum();
            let mut b = if z >= 0.0 { 1.0 } else { -1.0 };
            // Both uniforms are always drawn so the stream layout does not depend on the knobs.
            let u_model: f64 = rng.random();
            let u_flip: f64 = rng.random();
            if margin.is_finite() {
                let agree = 1.0 / (1.0 + (-margin * z.abs()).exp());
                if u_model >= agree {
                    b = -b;
                }
            }
            if u_flip < flip_rate {
                b = -b;
            }
            labels.push(b);
        }
    }
    let partition = (0..n).map(|a| a * q..(a + 1) * q).collect();
    Dataset { d, features, labels, partition }
}

fn parse_label(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse { line, msg: format!("invalid label `{tok}`") })?;
    if v == 1.0 {
        Ok(1.0)
    } else if v == -1.0 || v == 0.0 {
        Ok(-1.0)
    } else {
        Err(Error::Parse { line, msg: format!("label `{tok}` is not binary") })
    }
}

/// Parses svmlight/libsvm text: `label idx:val ...` with 1-based ascending
/// indices. Labels `+1`/`1` map to `+1`, `-1`/`0` to `-1`. `#` starts a
/// comment. The dimension is the largest index unless `dim` is given.
pub fn parse_svmlight(reader: impl BufRead, dim: Option<usize>) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut toks = body.split_whitespace();
        let label = parse_label(toks.next().unwrap_or_default(), lineno)?;
        let mut row = Vec::new();
        let mut last = 0;
        for tok in toks {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| Error::Parse { line: lineno, msg: format!("expected `index:value`, got `{tok}`") })?;
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Parse { line: lineno, msg: format!("invalid feature index `{idx}`") })?;
            if idx == 0 {
                return Err(Error::Parse { line: lineno, msg: "feature indices are 1-based".into() });
            }
            if idx <= last {
                return Err(Error::Parse { line: lineno, msg: format!("feature index {idx} is not ascending") });
            }
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse { line: lineno, msg: format!("invalid feature value `{val}`") })?;
            last = idx;
            row.push((idx - 1, val));
        }
        max_index = max_index.max(last);
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, msg: "no samples".into() });
    }
    let d = match dim {
        Some(d) if d < max_index => {
            return Err(Error::Parse { line: 0, msg: format!("feature index {max_index} exceeds dimension {d}") })
        }
        Some(d) => d,
        None => max_index,
    };
    let mut features = vec![0.0; rows.len() * d];
    for (r, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            features[r * d + j] = v;
        }
    }
    Dataset::new(d, features, labels)
}

pub fn load_svmlight(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_svmlight(BufReader::new(File::open(path)?), None)
}

/// Writes nonzero features in svmlight form. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_svmlight(data: &Dataset, mut out: impl Write) -> Result<()> {
    let mut line = String::new();
    for i in 0..data.len() {
        line.clear();
        line.push_str(if data.label(i) > 0.0 { "+1" } else { "-1" });
        for (j, v) in data.features(i).iter().enumerate() {
            if *v != 0.0 {
                let _ = write!(line, " {}:{}", j + 1, v);
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sparse_line() {
        let d = parse_svmlight("+1 1:0.5 3:-2\n".as_bytes(), None).unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.features(0), &[0.5, 0.0, -2.0]);
        assert_eq!(d.label(0), 1.0);
    }

    #[test]
    fn empty_file_is_an_error() {
        assert!(parse_svmlight("".as_bytes(), None).is_err());
        assert!(parse_svmlight("# only a comment\n\n".as_bytes(), None).is_err());
    }

    #[test]
    fn malformed_lines_report_location() {
        let cases = ["+1 1:0.5\n+1 2-3\n", "+1 1:0.5\n-1 3:1 2:1\n", "+1 1:0.5\n2 1:1\n", "+1 1:0.5\n-1 0:1\n", "+1 1:0.5\n-1 1:x\n"];
        for text in cases {
            match parse_svmlight(text.as_bytes(), None) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn zero_one_labels() {
        let d = parse_svmlight("0 1:1\n1 1:2\n".as_bytes(), None).unwrap();
        assert_eq!((d.label(0), d.label(1)), (-1.0, 1.0));
    }

    #[test]
    fn round_trip() {
        let spec = SyntheticSpec { n: 3, q: 7, d: 5, margin: 2.0, flip_rate: 0.1, seed: 11 };
        let data = synthetic_logistic_data(&spec);
        let mut buf = Vec::new();
        write_svmlight(&data, &mut buf).unwrap();
        let back = parse_svmlight(buf.as_slice(), None).unwrap();
        assert_eq!(back.dim(), data.dim());
        for i in 0..data.len() {
            assert_eq!(back.features(i), data.features(i));
            assert_eq!(back.label(i), data.label(i));
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_even() {
        let spec = SyntheticSpec { n: 20, q: 50, d: 30, margin: 3.0, flip_rate: 0.05, seed: 2 };
        let a = synthetic_logistic_data(&spec);
        let b = synthetic_logistic_data(&spec);
        assert_eq!(a, b);
        assert_eq!(a.agents(), 20);
        assert_eq!(a.local_size(), Some(50));
    }

    #[test]
    fn infinite_margin_gives_sign_labels() {
        let spec = SyntheticSpec { n: 2, q: 200, d: 6, margin: f64::INFINITY, flip_rate: 0.0, seed: 4 };
        let data = synthetic_logistic_data(&spec);
        let w = spec.planted_weights();
        for i in 0..data.len() {
            let z: f64 = data.features(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            assert_eq!(data.label(i), if z >= 0.0 { 1.0 } else { -1.0 });
        }
    }

    #[test]
    fn flip_rate_is_respected() {
        let spec = SyntheticSpec { n: 10, q: 1000, d: 5, margin: f64::INFINITY, flip_rate: 0.1, seed: 9 };
        let data = synthetic_logistic_data(&spec);
        let w = spec.planted_weights();
        let flipped = (0..data.len())
            .filter(|&i| {
                let z: f64 = data.features(i).iter().zip(&w).map(|(a, b)| a * b).sum();
                data.label(i) != if z >= 0.0 { 1.0 } else { -1.0 }
            })
            .count();
        let frac = flipped as f64 / data.len() as f64;
        assert!((frac - 0.1).abs() < 0.02, "{frac}");
    }

    #[test]
    fn partition_drops_remainder() {
        let d = parse_svmlight("+1 1:1\n-1 1:2\n+1 1:3\n-1 1:4\n+1 1:5\n".as_bytes(), None).unwrap();
        let p = d.partition_evenly(2, 0).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.partition(), &[0..2, 2..4]);
        assert!(d.partition_evenly(6, 0).is_err());
    }
}
