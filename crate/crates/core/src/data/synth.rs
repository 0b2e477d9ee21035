use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use super::{
    BinaryColumn, ColumnKind, ColumnSpec, DataError, DatasetSchema, EncodedColumn, EncodedDataset, Encoder,
    MissingPolicy, Result, Split, SplitFractions,
};
use crate::autodiff::{sigmoid, Tensor};

/// Two-group generator.
///
/// `a ~ Bernoulli(1/2)`, `x0 ~ N(0, 1)` independent of `a`,
/// `x1 = shift * (2a - 1) + N(0, 1)` and the remaining columns are noise.
/// Labels follow `y ~ Bernoulli(sigmoid(signal * x0 + kappa * (2a - 1)))`, with
/// `kappa` solved so that `P(y = 1 | a) = 1/2 ± correlation / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n: usize,
    pub dim: usize,
    /// Group-mean shift of the proxy column `x1`.
    pub shift: f64,
    /// Base-rate difference `P(y=1|a=1) - P(y=1|a=0)`, in (-1, 1).
    pub correlation: f64,
    /// Slope of the label logit in `x0`.
    pub signal: f64,
    /// Number of extra training pairs `(a=1, y=1)` / `(a=0, y=0)` sharing identical features.
    pub pairs: usize,
    /// Standard deviation of `x0` for pair members.
    pub pair_spread: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n: 6000, dim: 6, shift: 1.5, correlation: 0.5, signal: 2.0, pairs: 0, pair_spread: 0.25 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(DataError::Synth(format!("dim must be at least 2, got {}", self.dim)));
        }
        if self.n == 0 {
            return Err(DataError::Synth("n must be positive".into()));
        }
        if !(self.correlation.abs() < 1.0) {
            return Err(DataError::Synth(format!("correlation must lie in (-1, 1), got {}", self.correlation)));
        }
        for (name, v) in [("shift", self.shift), ("signal", self.signal), ("pair_spread", self.pair_spread)] {
            if !v.is_finite() || v < 0.0 {
                return Err(DataError::Synth(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Logit offset giving the requested base-rate difference.
    pub fn kappa(&self) -> f64 {
        if self.correlation == 0.0 {
            return 0.0;
        }
        let target = 0.5 + self.correlation.abs() / 2.0;
        let (mut lo, mut hi) = (0.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if base_rate(mid, self.signal) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi) * self.correlation.signum()
    }
}

/// `E[sigmoid(signal * t + kappa)]` for `t ~ N(0, 1)` by the trapezoid rule.
fn base_rate(kappa: f64, signal: f64) -> f64 {
    let (lo, hi, m) = (-12.0, 12.0, 6000);
    let h = (hi - lo) / m as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    (0..=m)
        .map(|k| {
            let t = lo + k as f64 * h;
            let w = if k == 0 || k == m { 0.5 } else { 1.0 };
            w * sigmoid(signal * t + kappa) * norm * (-0.5 * t * t).exp()
        })
        .sum::<f64>()
        * h
}

/// Closed-form `P(y = 1 | x)` under the generator. With `use_proxy = false`
/// the attribute is marginalized with its prior instead of inferred from `x1`.
pub fn bayes_posterior(spec: &SynthSpec, kappa: f64, row: &[f64], use_proxy: bool) -> f64 {
    let p1 = if use_proxy { sigmoid(2.0 * spec.shift * row[1]) } else { 0.5 };
    let s = spec.signal * row[0];
    p1 * sigmoid(s + kappa) + (1.0 - p1) * sigmoid(s - kappa)
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<EncodedDataset> {
    spec.validate()?;
    let kappa = spec.kappa();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = spec.n + 2 * spec.pairs;
    let mut data = Vec::with_capacity(total * spec.dim);
    let (mut y, mut a) = (Vec::with_capacity(total), Vec::with_capacity(total));
    let noise = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    for _ in 0..spec.n {
        let ai = rng.random_bool(0.5) as u8 as f64;
        let x0 = noise(&mut rng);
        let x1 = spec.shift * (2.0 * ai - 1.0) + noise(&mut rng);
        data.extend([x0, x1]);
        for _ in 2..spec.dim {
            data.push(noise(&mut rng));
        }
        let p = sigmoid(spec.signal * x0 + kappa * (2.0 * ai - 1.0));
        y.push(rng.random_bool(p) as u8 as f64);
        a.push(ai);
    }
    let mut split = SplitFractions::default().assign(spec.n, seed ^ 0x5eed_0001);
    let mut pairs = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let x0 = spec.pair_spread * noise(&mut rng);
        let x1 = spec.shift * if rng.random_bool(0.5) { 1.0 } else { -1.0 } + noise(&mut rng);
        let mut row = vec![x0, x1];
        row.extend((2..spec.dim).map(|_| noise(&mut rng)));
        let i = y.len();
        for (ai, yi) in [(1.0, 1.0), (0.0, 0.0)] {
            data.extend_from_slice(&row);
            y.push(yi);
            a.push(ai);
            split.push(Split::Train);
        }
        pairs.push((i, i + 1));
    }
    let encoder = Encoder {
        columns: (0..spec.dim).map(|j| EncodedColumn::Numeric { name: format!("x{j}"), mean: 0.0, sd: 1.0 }).collect(),
    };
    Ok(EncodedDataset {
        x: Tensor::from_vec(&[total, spec.dim], data),
        y,
        a,
        split,
        feature_names: encoder.feature_names(),
        encoder,
        sensitive_cols: None,
        pairs,
    })
}

/// Schema matching the files written by [`write_synth_csv`].
pub fn synth_schema(dim: usize) -> DatasetSchema {
    DatasetSchema {
        features: (0..dim).map(|j| ColumnSpec { name: format!("x{j}"), kind: ColumnKind::Numeric }).collect(),
        label: BinaryColumn { column: "label".into(), positive: vec!["1".into()], negative: vec!["0".into()] },
        sensitive: BinaryColumn { column: "group".into(), positive: vec!["1".into()], negative: vec!["0".into()] },
        missing_token: None,
        missing_policy: MissingPolicy::Error,
        include_sensitive: false,
    }
}

/// Writes `ds` as CSV (`x0..,label,group`) plus a JSON schema sidecar.
pub fn write_synth_csv(ds: &EncodedDataset, csv_path: &Path, schema_path: &Path) -> Result<()> {
    let io = |e| DataError::Io(csv_path.display().to_string(), e);
    let dim = ds.width();
    let mut w = std::io::BufWriter::new(std::fs::File::create(csv_path).map_err(io)?);
    let header: Vec<String> = (0..dim).map(|j| format!("x{j}")).chain(["label".into(), "group".into()]).collect();
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for i in 0..ds.len() {
        let row = ds.x.row(i);
        let mut line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        line.push(format!("{}", ds.y[i] as u8));
        line.push(format!("{}", ds.a[i] as u8));
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    synth_schema(dim).save(schema_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_hits_requested_base_rates() {
        for c in [0.0, 0.2, 0.5, -0.3] {
            let spec = SynthSpec { correlation: c, ..SynthSpec::default() };
            let k = spec.kappa();
            let diff = base_rate(k, spec.signal) - base_rate(-k, spec.signal);
            assert!((diff - c).abs() < 1e-9, "c={c}: {diff}");
        }
        assert_eq!(SynthSpec { correlation: 0.0, ..SynthSpec::default() }.kappa(), 0.0);
    }

    #[test]
    fn quadrature_matches_symmetry() {
        // sigmoid(-u) = 1 - sigmoid(u) and t is symmetric
        for k in [0.0, 0.7, 3.0] {
            assert!((base_rate(k, 1.3) + base_rate(-k, 1.3) - 1.0).abs() < 1e-12);
        }
        assert!((base_rate(0.0, 5.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn observed_base_rate_difference_matches_spec() {
        let spec = SynthSpec { n: 200_000, dim: 2, correlation: 0.5, ..SynthSpec::default() };
        let ds = synth_generate(&spec, 11).unwrap();
        let (mut n1, mut p1, mut n0, mut p0) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..ds.len() {
            if ds.a[i] > 0.5 {
                n1 += 1.0;
                p1 += ds.y[i];
            } else {
                n0 += 1.0;
                p0 += ds.y[i];
            }
        }
        let (r1, r0) = (p1 / n1, p0 / n0);
        let se = (r1 * (1.0 - r1) / n1 + r0 * (1.0 - r0) / n0).sqrt();
        assert!((r1 - r0 - 0.5).abs() < 4.0 * se, "{r1} - {r0}");
        assert!((r1 - 0.75).abs() < 4.0 * (r1 * (1.0 - r1) / n1).sqrt());
    }

    #[test]
    fn symmetric_generator_bayes_gap_vanishes() {
        let spec = SynthSpec { n: 100_000, dim: 3, shift: 0.0, correlation: 0.0, ..SynthSpec::default() };
        let ds = synth_generate(&spec, 2).unwrap();
        let k = spec.kappa();
        let (mut s, mut c) = ([0.0; 2], [0.0; 2]);
        for i in 0..ds.len() {
            let g = (ds.a[i] > 0.5) as usize;
            s[g] += bayes_posterior(&spec, k, ds.x.row(i), true);
            c[g] += 1.0;
        }
        assert!((s[0] / c[0] - s[1] / c[1]).abs() < 0.01);
    }

    #[test]
    fn proxy_free_posterior_ignores_x1() {
        let spec = SynthSpec::default();
        let k = spec.kappa();
        let a = bayes_posterior(&spec, k, &[0.3, -4.0], false);
        let b = bayes_posterior(&spec, k, &[0.3, 4.0], false);
        assert_eq!(a, b);
        assert!(bayes_posterior(&spec, k, &[0.3, 4.0], true) > b);
    }

    #[test]
    fn pair_flip_members_differ_only_in_attribute_and_label() {
        let spec = SynthSpec { n: 500, pairs: 40, ..SynthSpec::default() };
        let ds = synth_generate(&spec, 3).unwrap();
        assert_eq!(ds.len(), 580);
        assert_eq!(ds.pairs.len(), 40);
        for &(i, j) in &ds.pairs {
            assert_eq!(ds.x.row(i), ds.x.row(j));
            assert_eq!((ds.a[i], ds.y[i]), (1.0, 1.0));
            assert_eq!((ds.a[j], ds.y[j]), (0.0, 0.0));
            assert_eq!((ds.split[i], ds.split[j]), (Split::Train, Split::Train));
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SynthSpec { n: 300, ..SynthSpec::default() };
        let a = synth_generate(&spec, 4).unwrap();
        let b = synth_generate(&spec, 4).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), synth_generate(&spec, 5).unwrap().digest());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth_generate(&SynthSpec { dim: 1, ..SynthSpec::default() }, 0).is_err());
        assert!(synth_generate(&SynthSpec { correlation: 1.0, ..SynthSpec::default() }, 0).is_err());
        assert!(synth_generate(&SynthSpec { shift: f64::NAN, ..SynthSpec::default() }, 0).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec { n: 50, dim: 3, ..SynthSpec::default() };
        let ds = synth_generate(&spec, 1).unwrap();
        let (c, s) = (dir.path().join("d.csv"), dir.path().join("d.schema.json"));
        write_synth_csv(&ds, &c, &s).unwrap();
        let schema = DatasetSchema::load(&s).unwrap();
        let t = super::super::load_csv(&c, &schema).unwrap();
        assert_eq!(t.len(), 50);
        assert_eq!(t.features[7][2], super::super::Cell::Num(ds.x.row(7)[2]));
        assert_eq!(t.labels[7] as f64, ds.y[7]);
    }
}
