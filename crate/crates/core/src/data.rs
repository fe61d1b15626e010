//! Synthetic noisy-label datasets: Gaussian-mixture generation, label-noise
//! injection, splits, and a JSON-lines file format.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm2, scale, RngState};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const DATASET_FORMAT_VERSION: &str = "iflab-ds-1";

/// One labeled point `z = (x, y)`, optionally carrying the clean label and a
/// noisy flag for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub x: Vec<f64>,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noisy: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            if s.x.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "sample features",
                    expected: self.dim,
                    got: s.x.len(),
                });
            }
            if s.y >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.y,
                    num_classes: self.num_classes,
                });
            }
            if let Some(t) = s.true_y {
                if t >= self.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: t,
                        num_classes: self.num_classes,
                    });
                }
            }
            if !seen.insert(s.id) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Ids of samples flagged noisy, in dataset order.
    pub fn noisy_ids(&self) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.noisy == Some(true))
            .map(|s| s.id)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    AsymmetricPairflip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
        }
    }

    /// Named presets echoing the approximate CIFAR-10N noise levels. These
    /// are analogues, not reproductions: the real human noise is
    /// instance-dependent, ours is not.
    pub fn preset(name: &str) -> Option<NoiseSpec> {
        match name {
            "aggre-like" => Some(NoiseSpec::symmetric(0.10)),
            "random-like" => Some(NoiseSpec::symmetric(0.18)),
            "worst-like" => Some(NoiseSpec::symmetric(0.40)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!(
                "noise rate must be in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Class means at `class_sep * u_k` for random unit directions `u_k`
/// (pairwise-orthogonalized when `dim >= k`), unit isotropic noise around
/// them. Every sample starts clean: `true_y == y`, `noisy = false`.
pub fn gen_gaussian_mixture(
    k: usize,
    per_class_n: usize,
    dim: usize,
    class_sep: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    if dim < 1 {
        return Err(Error::InvalidConfig("dim must be >= 1".into()));
    }
    if k < 2 || per_class_n < 1 || class_sep <= 0.0 {
        return Err(Error::InvalidConfig(
            "need k >= 2, per_class_n >= 1, class_sep > 0".into(),
        ));
    }
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut dir = rng.gaussian_vec(dim)?;
        if dim >= k {
            // Gram-Schmidt against the accepted directions.
            for m in &means {
                let proj = dot(&dir, m)? / dot(m, m)?;
                axpy(-proj, m, &mut dir);
            }
        }
        let n = norm2(&dir);
        if n < 1e-12 {
            return Err(Error::NonFinite("mixture mean direction"));
        }
        scale(1.0 / n, &mut dir);
        means.push(dir);
    }
    let mut samples = Vec::with_capacity(k * per_class_n);
    let mut id = 0;
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class_n {
            let mut x = rng.gaussian_vec(dim)?;
            axpy(class_sep, mean, &mut x);
            samples.push(Sample {
                id,
                x,
                y: class,
                true_y: Some(class),
                noisy: Some(false),
            });
            id += 1;
        }
    }
    Ok(Dataset {
        samples,
        num_classes: k,
        dim,
    })
}

/// Outcome of [`inject_label_noise`]; `rate_underflow` is set when
/// `round(rate * n) < 1` and the dataset came back unchanged.
#[derive(Clone, Debug)]
pub struct NoiseOutcome {
    pub dataset: Dataset,
    pub flipped: usize,
    pub rate_underflow: bool,
}

/// Flip exactly `round(rate * n)` labels, chosen without replacement.
/// Symmetric noise draws uniformly over the other classes; pairflip maps
/// class `k` to `k + 1 mod K`.
pub fn inject_label_noise(
    dataset: &Dataset,
    spec: &NoiseSpec,
    rng: &mut RngState,
) -> Result<NoiseOutcome> {
    spec.validate()?;
    if dataset.samples.iter().any(|s| s.true_y.is_none()) {
        return Err(Error::InvalidConfig(
            "noise injection needs true labels on every sample".into(),
        ));
    }
    let n = dataset.len();
    let target = (spec.rate * n as f64).round() as usize;
    if target == 0 {
        return Ok(NoiseOutcome {
            dataset: dataset.clone(),
            flipped: 0,
            rate_underflow: spec.rate > 0.0,
        });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut indices);
    let chosen: std::collections::HashSet<usize> = indices.into_iter().take(target).collect();

    let k = dataset.num_classes;
    let mut out = dataset.clone();
    for (i, s) in out.samples.iter_mut().enumerate() {
        let true_y = s.true_y.expect("checked above");
        if chosen.contains(&i) {
            let new_label = match spec.kind {
                NoiseKind::Symmetric => {
                    // Uniform over the k-1 other classes.
                    let shift = 1 + rng.next_below(k - 1);
                    (true_y + shift) % k
                }
                NoiseKind::AsymmetricPairflip => (true_y + 1) % k,
            };
            s.y = new_label;
            s.noisy = Some(true);
        } else {
            s.y = true_y;
            s.noisy = Some(false);
        }
    }
    Ok(NoiseOutcome {
        dataset: out,
        flipped: target,
        rate_underflow: false,
    })
}

/// Shuffled disjoint partition with largest-remainder sizing, so part sizes
/// are exact whenever `fraction * n` is integral.
pub fn split(dataset: &Dataset, fractions: &[f64], rng: &mut RngState) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| *f <= 0.0) {
        return Err(Error::InvalidConfig("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "fractions must sum to 1, got {total}"
        )));
    }
    let n = dataset.len();
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    // Largest remainder gets the leftover slots.
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..(n - assigned) {
        sizes[order[i % order.len()]] += 1;
    }

    let mut indices: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut indices);
    let mut parts = Vec::with_capacity(fractions.len());
    let mut cursor = 0;
    for size in sizes {
        let part: Vec<Sample> = indices[cursor..cursor + size]
            .iter()
            .map(|&i| dataset.samples[i].clone())
            .collect();
        cursor += size;
        parts.push(Dataset {
            samples: part,
            num_classes: dataset.num_classes,
            dim: dataset.dim,
        });
    }
    Ok(parts)
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    k: usize,
    dim: usize,
}

/// Write JSON-lines: a header line with `{version, k, dim}` followed by one
/// sample per line.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        version: DATASET_FORMAT_VERSION.to_string(),
        k: dataset.num_classes,
        dim: dataset.dim,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "missing header line".into(),
        })?
        .map_err(Error::Io)?;
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.version != DATASET_FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!(
                "unsupported dataset version {:?}, expected {:?}",
                header.version, DATASET_FORMAT_VERSION
            ),
        });
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno + 2,
            msg: format!("bad sample: {e}"),
        })?;
        if s.x.len() != header.dim {
            return Err(Error::Parse {
                line: lineno + 2,
                msg: format!("field x: expected dim {}, got {}", header.dim, s.x.len()),
            });
        }
        if s.y >= header.k {
            return Err(Error::Parse {
                line: lineno + 2,
                msg: format!("field y: label {} out of range for k={}", s.y, header.k),
            });
        }
        samples.push(s);
    }
    let ds = Dataset {
        samples,
        num_classes: header.k,
        dim: header.dim,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixture_shapes_and_determinism() {
        let a = gen_gaussian_mixture(3, 1, 4, 2.0, &mut RngState::new(4)).unwrap();
        assert_eq!(a.len(), 3);
        let b = gen_gaussian_mixture(3, 10, 4, 2.0, &mut RngState::new(9)).unwrap();
        let c = gen_gaussian_mixture(3, 10, 4, 2.0, &mut RngState::new(9)).unwrap();
        assert_eq!(b, c);
        assert!(b.samples.iter().all(|s| s.true_y == Some(s.y)));
        assert!(gen_gaussian_mixture(2, 1, 0, 1.0, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn noise_counts_exact() {
        let ds = gen_gaussian_mixture(2, 250, 3, 3.0, &mut RngState::new(1)).unwrap();
        let out = inject_label_noise(&ds, &NoiseSpec::symmetric(0.4), &mut RngState::new(2)).unwrap();
        assert_eq!(out.flipped, 200);
        let noisy = out.dataset.noisy_ids();
        assert_eq!(noisy.len(), 200);
        for s in &out.dataset.samples {
            if s.noisy == Some(true) {
                assert_ne!(Some(s.y), s.true_y);
                // K=2 symmetric: the unique other class.
                assert_eq!(s.y, 1 - s.true_y.unwrap());
            } else {
                assert_eq!(Some(s.y), s.true_y);
            }
        }
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let ds = gen_gaussian_mixture(2, 10, 2, 3.0, &mut RngState::new(1)).unwrap();
        let out = inject_label_noise(&ds, &NoiseSpec::symmetric(0.0), &mut RngState::new(2)).unwrap();
        assert_eq!(out.dataset, ds);
        assert_eq!(out.flipped, 0);
        assert!(!out.rate_underflow);

        // rate * n rounds to zero -> unchanged, but flagged.
        let tiny = inject_label_noise(&ds, &NoiseSpec::symmetric(0.01), &mut RngState::new(2)).unwrap();
        assert_eq!(tiny.dataset, ds);
        assert!(tiny.rate_underflow);
    }

    #[test]
    fn pairflip_wraps() {
        let ds = gen_gaussian_mixture(3, 30, 2, 3.0, &mut RngState::new(6)).unwrap();
        let spec = NoiseSpec {
            kind: NoiseKind::AsymmetricPairflip,
            rate: 0.5,
        };
        let out = inject_label_noise(&ds, &spec, &mut RngState::new(7)).unwrap();
        for s in &out.dataset.samples {
            if s.noisy == Some(true) {
                assert_eq!(s.y, (s.true_y.unwrap() + 1) % 3);
            }
        }
    }

    #[test]
    fn split_partition() {
        let ds = gen_gaussian_mixture(2, 50, 2, 3.0, &mut RngState::new(3)).unwrap();
        let parts = split(&ds, &[0.8, 0.2], &mut RngState::new(4)).unwrap();
        assert_eq!(parts[0].len(), 80);
        assert_eq!(parts[1].len(), 20);
        let mut ids: Vec<usize> = parts
            .iter()
            .flat_map(|p| p.samples.iter().map(|s| s.id))
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());

        let whole = split(&ds, &[1.0], &mut RngState::new(4)).unwrap();
        assert_eq!(whole[0].len(), 100);

        assert!(split(&ds, &[0.5, 0.6], &mut RngState::new(4)).is_err());
    }

    #[test]
    fn roundtrip_file() {
        let ds = gen_gaussian_mixture(3, 5, 2, 3.0, &mut RngState::new(5)).unwrap();
        let noisy = inject_label_noise(&ds, &NoiseSpec::symmetric(0.2), &mut RngState::new(6))
            .unwrap()
            .dataset;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_dataset(&noisy, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(noisy, back);
    }

    #[test]
    fn empty_dataset_roundtrip() {
        let ds = Dataset {
            samples: vec![],
            num_classes: 2,
            dim: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"version\":\"iflab-ds-1\",\"k\":2,\"dim\":1}\n{\"id\":0,\"x\":[1.0],\"y\":2}\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn presets() {
        assert_eq!(NoiseSpec::preset("worst-like").unwrap().rate, 0.40);
        assert!(NoiseSpec::preset("nope").is_none());
    }
}
