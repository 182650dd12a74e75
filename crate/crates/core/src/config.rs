//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::condexp::BasisSpec;
use crate::problem::BenchmarkId;

/// Configuration problem, with the offending line when there is one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        Self {
            line: Some(line),
            message: message.into(),
        }
    }

    fn general(message: impl Into<String>) -> Self {
        Self {
            line: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Raw entries with the line each key was read from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    /// One `key = value` per line; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| ConfigError::at(line, format!("expected key = value, got '{content}'")))?;
            let key = key.trim().to_ascii_lowercase();
            if key.is_empty() {
                return Err(ConfigError::at(line, "empty key"));
            }
            if let Some((_, first)) = entries.get(&key) {
                return Err(ConfigError::at(
                    line,
                    format!("duplicate key '{key}' (first on line {first})"),
                ));
            }
            entries.insert(key, (value.trim().to_string(), line));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }

    pub fn keys(&self) -> impl Iterator<Item = (&str, usize)> {
        self.entries.iter().map(|(k, (_, l))| (k.as_str(), *l))
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some((v, line)) => v
                .parse::<T>()
                .map(Some)
                .map_err(|e| ConfigError::at(line, format!("invalid value '{v}' for {key}: {e}"))),
        }
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.parsed(key)?
            .ok_or_else(|| ConfigError::general(format!("missing required key '{key}'")))
    }
}

pub const KNOWN_KEYS: &[&str] = &[
    "benchmark",
    "param",
    "x0",
    "horizon",
    "grids",
    "samples",
    "bundles",
    "inner_samples",
    "estimator",
    "basis",
    "degree",
    "cells",
    "seed",
    "output_dir",
    "deterministic",
    "fine_factor",
    "slope_min",
    "slope_max",
    "representation_ratio",
    "control_variates",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Regression,
    Nested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: BenchmarkId,
    /// `alpha` for LinearZ, `gamma` for LinearY; ignored for Trivial.
    pub param: f64,
    pub x0: f64,
    pub horizon: f64,
    pub grids: Vec<usize>,
    pub samples: usize,
    pub bundles: usize,
    pub inner_samples: usize,
    pub estimator: EstimatorKind,
    pub basis: BasisSpec<f64>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub fine_factor: usize,
    pub slope_min: f64,
    pub slope_max: f64,
    pub representation_ratio: f64,
    pub control_variates: bool,
}

fn parse_list(value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|e| ConfigError::at(line, format!("invalid grid size '{s}': {e}")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::general(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text)?;
        for (key, line) in kv.keys() {
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::at(line, format!("unknown key '{key}'")));
            }
        }
        let (bench, bench_line) = kv
            .get("benchmark")
            .ok_or_else(|| ConfigError::general("missing required key 'benchmark'"))?;
        let benchmark = BenchmarkId::parse(bench)
            .ok_or_else(|| ConfigError::at(bench_line, format!("unknown benchmark '{bench}'")))?;
        let seed: u64 = kv.required("seed")?;
        let grids = match kv.get("grids") {
            Some((v, line)) => parse_list(v, line)?,
            None => vec![8, 16, 32, 64],
        };
        let estimator = match kv.get("estimator") {
            None => EstimatorKind::Regression,
            Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                "regression" => EstimatorKind::Regression,
                "nested" => EstimatorKind::Nested,
                other => return Err(ConfigError::at(line, format!("unknown estimator '{other}'"))),
            },
        };
        let degree: usize = kv.or("degree", 3)?;
        let cells: usize = kv.or("cells", 16)?;
        let basis = match kv.get("basis") {
            None => BasisSpec::polynomial(degree),
            Some((v, line)) => match v.to_ascii_lowercase().as_str() {
                "poly" | "polynomial" => BasisSpec::polynomial(degree),
                "partition" => BasisSpec::partition(cells),
                other => return Err(ConfigError::at(line, format!("unknown basis '{other}'"))),
            },
        };
        let output_dir = PathBuf::from(kv.get("output_dir").map(|(v, _)| v).unwrap_or("fbdsde-out"));
        let config = Self {
            benchmark,
            param: kv.or("param", 0.5)?,
            x0: kv.or("x0", 1.0)?,
            horizon: kv.or("horizon", 1.0)?,
            grids,
            samples: kv.or("samples", 1 << 14)?,
            bundles: kv.or("bundles", 32)?,
            inner_samples: kv.or("inner_samples", 4096)?,
            estimator,
            basis,
            seed,
            output_dir,
            deterministic: kv.or("deterministic", true)?,
            fine_factor: kv.or("fine_factor", 16)?,
            slope_min: kv.or("slope_min", 0.7)?,
            slope_max: kv.or("slope_max", 1.3)?,
            representation_ratio: kv.or("representation_ratio", 0.25)?,
            control_variates: kv.or("control_variates", true)?,
        };
        config.validate(&kv)?;
        Ok(config)
    }

    fn validate(&self, kv: &KeyValues) -> Result<(), ConfigError> {
        let line_of = |key: &str| kv.get(key).map(|(_, l)| l);
        let fail = |key: &str, message: String| ConfigError {
            line: line_of(key),
            message,
        };
        if self.grids.len() < 2 {
            return Err(fail("grids", "at least two grid sizes are needed for a rate".into()));
        }
        if let Some(&n) = self.grids.iter().find(|&&n| n < 2) {
            return Err(fail("grids", format!("every N must be at least 2, got {n}")));
        }
        let mut sorted = self.grids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.grids.len() {
            return Err(fail("grids", "grid sizes must be distinct".into()));
        }
        let basis_size = match self.basis.kind {
            crate::condexp::BasisKind::Polynomial { degree } => degree + 1,
            crate::condexp::BasisKind::Partition { cells_per_axis } => cells_per_axis,
        };
        if self.samples < basis_size.max(2) {
            return Err(fail(
                "samples",
                format!(
                    "samples ({}) must be at least the basis size ({basis_size})",
                    self.samples
                ),
            ));
        }
        if self.bundles == 0 {
            return Err(fail("bundles", "bundles must be positive".into()));
        }
        if self.fine_factor == 0 {
            return Err(fail("fine_factor", "fine_factor must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(fail("horizon", "horizon must be positive".into()));
        }
        if !(self.slope_min < self.slope_max) {
            return Err(fail("slope_min", "slope_min must be below slope_max".into()));
        }
        if self.estimator == EstimatorKind::Nested && self.inner_samples < 100 {
            return Err(fail(
                "inner_samples",
                "the nested estimator needs at least 100 inner samples".into(),
            ));
        }
        if let Err(e) = self.basis.validate(1) {
            return Err(fail("basis", e.to_string()));
        }
        Ok(())
    }

    /// Echo of every setting in `key = value` form.
    pub fn manifest(&self) -> String {
        let grids: Vec<String> = self.grids.iter().map(|n| n.to_string()).collect();
        let (basis, degree, cells) = match self.basis.kind {
            crate::condexp::BasisKind::Polynomial { degree } => ("poly", degree, 16),
            crate::condexp::BasisKind::Partition { cells_per_axis } => ("partition", 3, cells_per_axis),
        };
        let estimator = match self.estimator {
            EstimatorKind::Regression => "regression",
            EstimatorKind::Nested => "nested",
        };
        format!(
            "benchmark = {}\nparam = {}\nx0 = {}\nhorizon = {}\ngrids = {}\nsamples = {}\nbundles = {}\ninner_samples = {}\nestimator = {}\nbasis = {}\ndegree = {}\ncells = {}\nseed = {}\noutput_dir = {}\ndeterministic = {}\nfine_factor = {}\nslope_min = {}\nslope_max = {}\nrepresentation_ratio = {}\ncontrol_variates = {}\n",
            self.benchmark,
            self.param,
            self.x0,
            self.horizon,
            grids.join(","),
            self.samples,
            self.bundles,
            self.inner_samples,
            estimator,
            basis,
            degree,
            cells,
            self.seed,
            self.output_dir.display(),
            self.deterministic,
            self.fine_factor,
            self.slope_min,
            self.slope_max,
            self.representation_ratio,
            self.control_variates,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "benchmark = linear_z\nseed = 7\n";

    #[test]
    fn defaults_fill_missing_keys() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.benchmark, BenchmarkId::LinearZ);
        assert_eq!(c.grids, vec![8, 16, 32, 64]);
        assert_eq!(c.samples, 16384);
        assert_eq!(c.bundles, 32);
        assert_eq!(c.basis, BasisSpec::polynomial(3));
        assert!(c.deterministic);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# study\n\nbenchmark = linear_y   # gamma below\nparam = 0.25\nseed=3\ngrids = 4, 8 16\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.param, 0.25);
        assert_eq!(c.grids, vec![4, 8, 16]);
    }

    #[test]
    fn missing_seed_names_the_key() {
        let err = ExperimentConfig::parse("benchmark = trivial\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(err.line, None);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("benchmark = trivial\nseed = 1\nsamples = many\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        let err = ExperimentConfig::parse("benchmark = trivial\nseed = 1\nbogus = 2\n").unwrap_err();
        assert_eq!(err.line, Some(3));
        let err = ExperimentConfig::parse("benchmark = trivial\nno equals sign\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        let err = ExperimentConfig::parse("benchmark = trivial\nseed = 1\nseed = 2\n").unwrap_err();
        assert_eq!(err.line, Some(3));
    }

    #[test]
    fn grid_invariants_are_enforced() {
        for grids in ["8", "1, 8", "8, 8, 16"] {
            let text = format!("{MINIMAL}grids = {grids}\n");
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert_eq!(err.line, Some(3), "{grids}: {err}");
        }
        let err = ExperimentConfig::parse(&format!("{MINIMAL}samples = 2\n")).unwrap_err();
        assert!(err.message.contains("basis size"));
    }

    #[test]
    fn manifest_round_trips() {
        let c = ExperimentConfig::parse("benchmark = linear_y\nseed = 11\nbasis = partition\ncells = 8\ngrids = 4,8\n")
            .unwrap();
        let again = ExperimentConfig::parse(&c.manifest()).unwrap();
        assert_eq!(c, again);
    }
}
