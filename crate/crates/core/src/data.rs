//! Primary-task data: a synthetic Gaussian-blob classification task, CSV
//! ingestion, and the seeded train/test/adversary split.
//!
//! The blobs generator keeps class means on a sphere of radius `4 * sigma`,
//! so class separation scales with the noise level and a linear classifier
//! is sufficient at small `sigma`. The adversary subset is an i.i.d. slice
//! of the same distribution — the stand-in for an attacker who holds a
//! smaller sample from the task domain.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        let ds = Self {
            inputs,
            labels,
            classes,
            name: name.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(CoreError::Structural(format!(
                "dataset {:?}: {} inputs vs {} labels",
                self.name,
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let dim = self.dim();
        for (i, x) in self.inputs.iter().enumerate() {
            if x.len() != dim {
                return Err(CoreError::Structural(format!(
                    "dataset {:?}: row {i} has {} coordinates, expected {dim}",
                    self.name,
                    x.len()
                )));
            }
        }
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= self.classes {
                return Err(CoreError::Domain(format!(
                    "dataset {:?}: label {y} at row {i} out of range [0, {})",
                    self.name, self.classes
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    fn subset(&self, idx: &[usize], name: &str) -> Self {
        Self {
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: format!("{}/{name}", self.name),
        }
    }
}

/// Train/test/adversary fractions plus the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub adversary: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.test, self.adversary];
        if parts.iter().any(|f| *f < 0.0) {
            return Err(CoreError::Config("split fractions must be >= 0".into()));
        }
        if parts.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(CoreError::Config(format!(
                "split fractions sum to {} > 1",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

/// One standard normal draw via Box–Muller, deterministic per generator
/// state.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1], keeps the log finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Synthetic blobs task: `classes` Gaussian clusters in `dim` dimensions.
/// Class means are drawn once on the unit sphere and scaled by `4 * sigma`;
/// every point is its class mean plus `N(0, sigma^2 I)` noise.
pub fn gen_blobs(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(CoreError::Config("blobs need at least 2 classes".into()));
    }
    if dim == 0 {
        return Err(CoreError::Config("blobs need dim >= 1".into()));
    }
    if sigma < 0.0 {
        return Err(CoreError::Config("sigma must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let raw: Vec<f64> = (0..dim).map(|_| standard_normal(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mean: Vec<f64> = if norm == 0.0 {
            vec![0.0; dim]
        } else {
            raw.iter().map(|v| v / norm * 4.0 * sigma).collect()
        };
        means.push(mean);
    }
    let mut inputs = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let point: Vec<f64> = mean.iter().map(|&m| m + sigma * standard_normal(&mut rng)).collect();
            inputs.push(point);
            labels.push(c);
        }
    }
    LabeledDataset::new(inputs, labels, classes, format!("blobs-c{classes}-d{dim}-s{seed}"))
}

/// Parse a headerless CSV of `dim` floats plus one integer label per row.
pub fn load_csv(path: &Path, dim: usize, classes: usize) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    parse_csv(&text, dim, classes, name)
}

fn parse_csv(text: &str, dim: usize, classes: usize, name: String) -> Result<LabeledDataset> {
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(CoreError::Parse {
                location: format!("line {lineno}"),
                message: format!("expected {} comma-separated fields, found {}", dim + 1, fields.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for (col, field) in fields[..dim].iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|e| CoreError::Parse {
                location: format!("line {lineno}, field {}", col + 1),
                message: format!("bad float {field:?}: {e}"),
            })?;
            row.push(v);
        }
        let label: usize = fields[dim].trim().parse().map_err(|e| CoreError::Parse {
            location: format!("line {lineno}, field {}", dim + 1),
            message: format!("bad label {:?}: {e}", fields[dim]),
        })?;
        if label >= classes {
            return Err(CoreError::Domain(format!(
                "line {lineno}: label {label} out of range [0, {classes})"
            )));
        }
        inputs.push(row);
        labels.push(label);
    }
    LabeledDataset::new(inputs, labels, classes, name)
}

/// Write a dataset in the same headerless CSV dialect `load_csv` reads.
/// Floats use Rust's shortest round-trippable decimal form.
pub fn save_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (x, y) in ds.inputs.iter().zip(&ds.labels) {
        for v in x {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{y}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Split into disjoint train/test/adversary subsets by a seeded shuffle.
/// Subset sizes are `floor(fraction * len)`; if the fractions sum to less
/// than one, the remaining rows are simply left out.
pub fn split(ds: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Fisher–Yates, spelled out so the shuffle is pinned to this crate
    // rather than to a library's internal algorithm choice.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = ds.len() as f64;
    let n_train = (spec.train * n).floor() as usize;
    let n_test = (spec.test * n).floor() as usize;
    let n_adv = (spec.adversary * n).floor() as usize;
    let train = ds.subset(&order[..n_train], "train");
    let test = ds.subset(&order[n_train..n_train + n_test], "test");
    let adversary = ds.subset(&order[n_train + n_test..n_train + n_test + n_adv], "adversary");
    Ok((train, test, adversary))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = gen_blobs(3, 5, 10, 0.2, 9).unwrap();
        let b = gen_blobs(3, 5, 10, 0.2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        for c in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == c).count(), 10);
        }
    }

    #[test]
    fn zero_sigma_collapses_to_means() {
        let ds = gen_blobs(2, 4, 5, 0.0, 1).unwrap();
        for c in 0..2 {
            let rows: Vec<_> = ds
                .inputs
                .iter()
                .zip(&ds.labels)
                .filter(|(_, &y)| y == c)
                .map(|(x, _)| x)
                .collect();
            for row in &rows {
                assert_eq!(*row, rows[0]);
            }
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = gen_blobs(2, 3, 50, 0.1, 2).unwrap();
        let spec = SplitSpec {
            train: 0.5,
            test: 0.25,
            adversary: 0.25,
            seed: 3,
        };
        let (train, test, adv) = split(&ds, &spec).unwrap();
        assert_eq!((train.len(), test.len(), adv.len()), (50, 25, 25));
        // Same seed, same split.
        let (train2, ..) = split(&ds, &spec).unwrap();
        assert_eq!(train.inputs, train2.inputs);
        // All-train split keeps everything.
        let all = SplitSpec {
            train: 1.0,
            test: 0.0,
            adversary: 0.0,
            seed: 3,
        };
        let (train, test, adv) = split(&ds, &all).unwrap();
        assert_eq!((train.len(), test.len(), adv.len()), (100, 0, 0));
        // Over-full fractions are a config error.
        let bad = SplitSpec {
            train: 0.8,
            test: 0.3,
            adversary: 0.0,
            seed: 3,
        };
        assert!(split(&ds, &bad).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let ds = gen_blobs(3, 4, 7, 0.3, 5).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path, 4, 3).unwrap();
        assert_eq!(back.inputs, ds.inputs);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let err = parse_csv("1.0,2.0,0\nx,2.0,1\n", 2, 2, "t".into()).unwrap_err();
        match err {
            CoreError::Parse { location, .. } => assert!(location.contains("line 2")),
            other => panic!("expected parse error, got {other:?}"),
        }
        let err = parse_csv("1.0,2.0,5\n", 2, 2, "t".into()).unwrap_err();
        assert!(matches!(err, CoreError::Domain(_)));
        let err = parse_csv("1.0,2.0\n", 2, 2, "t".into()).unwrap_err();
        assert!(matches!(err, CoreError::Parse { .. }));
    }

    #[test]
    fn empty_csv_is_an_empty_dataset() {
        let ds = parse_csv("", 3, 2, "t".into()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn hand_written_rows_parse_exactly() {
        let ds = parse_csv("1.5,-2.25,0\n0.0,3.0,1\n-1.0,0.5,0\n", 2, 2, "t".into()).unwrap();
        assert_eq!(ds.inputs[0], vec![1.5, -2.25]);
        assert_eq!(ds.inputs[1], vec![0.0, 3.0]);
        assert_eq!(ds.inputs[2], vec![-1.0, 0.5]);
        assert_eq!(ds.labels, vec![0, 1, 0]);
    }
}
