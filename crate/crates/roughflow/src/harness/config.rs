//! Flat `key = value` experiment configuration.
//!
//! The on-disk format is UTF-8 text, one assignment per line, `#` starting
//! a comment and blank lines ignored. Every key is optional (defaults
//! below), unknown and repeated keys are rejected with their line number,
//! and parsed values are range-checked by [`ExperimentConfig::validate`].

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::suites::{FieldSuite, TransversalKind};
use super::HarnessError;

/// One experiment run, fully determined by these values.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    /// Base seed; every stochastic ingredient derives from it.
    pub seed: u64,
    /// Driver dimension.
    pub d: usize,
    /// State (leaf) dimension.
    pub p: usize,
    /// Time horizon.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Hölder exponent of the lifts, in (1/3, 1/2).
    pub alpha: f64,
    /// Coarsest dyadic level of the Wong-Zakai ladder.
    pub m_lo: u32,
    /// Finest dyadic level; the Brownian sample lives here.
    pub m_hi: u32,
    /// Noise scales for the concentration experiment, decreasing.
    pub epsilons: Vec<f64>,
    /// Named vector-field suite on ℝ^p.
    #[serde(rename = "suite")]
    pub field_suite: FieldSuite,
    /// Transversal of the suspension space used by foliated runs.
    pub transversal: TransversalKind,
    /// Output directory for CSV/JSON emission.
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            d: 1,
            p: 1,
            horizon: 1.0,
            alpha: 0.4,
            m_lo: 6,
            m_hi: 12,
            epsilons: vec![0.4, 0.2, 0.1],
            field_suite: FieldSuite::Exponential,
            transversal: TransversalKind::Circle,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// The config file schema, printed on usage and validation errors.
    pub fn schema() -> &'static str {
        "config file: UTF-8 text, one `key = value` per line, `#` comments
  seed         u64    base RNG seed                               (default 0)
  d            usize  driver dimension, >= 1                      (default 1)
  p            usize  state dimension, >= 1                       (default 1)
  T            f64    time horizon, > 0                           (default 1)
  alpha        f64    Holder exponent, in (1/3, 1/2)              (default 0.4)
  m_lo         u32    coarsest dyadic level                       (default 6)
  m_hi         u32    finest dyadic level, >= m_lo                (default 12)
  epsilons     f64,.. noise scales, positive and decreasing       (default 0.4,0.2,0.1)
  suite        name   zero|exponential|rotation|additive|drift|bounded
                                                                  (default exponential)
  transversal  name   circle|cantor|finite                        (default circle)
  out_dir      path   output directory                            (default out)"
    }

    /// Parses the flat text format over the defaults.
    pub fn parse_str(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: HashSet<&str> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let bad = |msg: String| HarnessError::ConfigLine { line, msg };
            let stripped = match raw.split_once('#') {
                Some((head, _)) => head,
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {stripped:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                return Err(bad("empty key or value".into()));
            }
            if !seen.insert(key) {
                return Err(bad(format!("duplicate key {key:?}")));
            }
            match key {
                "seed" => cfg.seed = parse_scalar(value, line, key)?,
                "d" => cfg.d = parse_scalar(value, line, key)?,
                "p" => cfg.p = parse_scalar(value, line, key)?,
                "T" => cfg.horizon = parse_scalar(value, line, key)?,
                "alpha" => cfg.alpha = parse_scalar(value, line, key)?,
                "m_lo" => cfg.m_lo = parse_scalar(value, line, key)?,
                "m_hi" => cfg.m_hi = parse_scalar(value, line, key)?,
                "epsilons" => {
                    cfg.epsilons = value
                        .split(',')
                        .map(|tok| parse_scalar(tok.trim(), line, key))
                        .collect::<Result<_, _>>()?;
                }
                "suite" => {
                    cfg.field_suite = value.parse().map_err(|e: String| bad(e))?;
                }
                "transversal" => {
                    cfg.transversal = value.parse().map_err(|e: String| bad(e))?;
                }
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        Ok(cfg)
    }

    /// Reads and parses a config file, then range-checks it.
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::parse_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Range checks shared by every experiment.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.d == 0 || self.p == 0 {
            return fail("d and p must be >= 1".into());
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return fail(format!("T must be positive and finite, got {}", self.horizon));
        }
        if !(self.alpha > 1.0 / 3.0 && self.alpha < 0.5) {
            return fail(format!("alpha must lie in (1/3, 1/2), got {}", self.alpha));
        }
        if self.m_lo > self.m_hi {
            return fail(format!("m_lo = {} exceeds m_hi = {}", self.m_lo, self.m_hi));
        }
        if self.epsilons.is_empty() {
            return fail("epsilons must be non-empty".into());
        }
        for pair in self.epsilons.windows(2) {
            if !(pair[1] < pair[0]) {
                return fail(format!(
                    "epsilons must be strictly decreasing, got {} then {}",
                    pair[0], pair[1]
                ));
            }
        }
        if self
            .epsilons
            .iter()
            .any(|e| !(e.is_finite() && *e > 0.0))
        {
            return fail("epsilons must be positive and finite".into());
        }
        if self.field_suite == FieldSuite::Rotation && self.p != 2 {
            return fail(format!("the rotation suite needs p = 2, got p = {}", self.p));
        }
        Ok(())
    }
}

fn parse_scalar<T: std::str::FromStr>(
    value: &str,
    line: usize,
    key: &str,
) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::ConfigLine {
        line,
        msg: format!("cannot parse {value:?} for key {key:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_parse_over_the_defaults() {
        let text = "\
# full override
seed = 42
d = 2
p = 2          # trailing comment
T = 0.5
alpha = 0.45

m_lo = 4
m_hi = 9
epsilons = 0.8, 0.4, 0.2
suite = rotation
transversal = cantor
out_dir = results/run1
";
        let cfg = ExperimentConfig::parse_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!((cfg.d, cfg.p), (2, 2));
        assert_eq!(cfg.horizon, 0.5);
        assert_eq!(cfg.alpha, 0.45);
        assert_eq!((cfg.m_lo, cfg.m_hi), (4, 9));
        assert_eq!(cfg.epsilons, vec![0.8, 0.4, 0.2]);
        assert_eq!(cfg.field_suite, FieldSuite::Rotation);
        assert_eq!(cfg.transversal, TransversalKind::Cantor);
        assert_eq!(cfg.out_dir, PathBuf::from("results/run1"));

        let partial = ExperimentConfig::parse_str("seed = 7\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.d, ExperimentConfig::default().d);
    }

    #[test]
    fn bad_lines_are_rejected_with_their_number() {
        let unknown = ExperimentConfig::parse_str("seed = 1\nwat = 3\n");
        match unknown {
            Err(HarnessError::ConfigLine { line: 2, msg }) => {
                assert!(msg.contains("unknown key"), "{msg}")
            }
            other => panic!("expected an unknown-key error, got {other:?}"),
        }

        let duplicate = ExperimentConfig::parse_str("seed = 1\n\nseed = 2\n");
        match duplicate {
            Err(HarnessError::ConfigLine { line: 3, msg }) => {
                assert!(msg.contains("duplicate"), "{msg}")
            }
            other => panic!("expected a duplicate-key error, got {other:?}"),
        }

        let garbled = ExperimentConfig::parse_str("alpha == 0.4\n");
        assert!(matches!(
            garbled,
            Err(HarnessError::ConfigLine { line: 1, .. })
        ));

        let unparsable = ExperimentConfig::parse_str("m_lo = four\n");
        assert!(matches!(
            unparsable,
            Err(HarnessError::ConfigLine { line: 1, .. })
        ));

        let no_assignment = ExperimentConfig::parse_str("just words\n");
        assert!(matches!(
            no_assignment,
            Err(HarnessError::ConfigLine { line: 1, .. })
        ));
    }

    #[test]
    fn validation_enforces_the_documented_ranges() {
        let ok = ExperimentConfig::default();
        ok.validate().unwrap();

        let mut bad = ok.clone();
        bad.alpha = 0.3;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.d = 0;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.horizon = -1.0;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.m_lo = 13;
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.epsilons = vec![0.1, 0.2];
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.epsilons = vec![0.4, 0.4];
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.epsilons.clear();
        assert!(bad.validate().is_err());

        let mut bad = ok.clone();
        bad.field_suite = FieldSuite::Rotation;
        assert!(bad.validate().is_err(), "rotation needs p = 2");
        bad.p = 2;
        bad.validate().unwrap();
    }

    #[test]
    fn the_schema_mentions_every_key() {
        let schema = ExperimentConfig::schema();
        for key in [
            "seed",
            "d",
            "p",
            "T",
            "alpha",
            "m_lo",
            "m_hi",
            "epsilons",
            "suite",
            "transversal",
            "out_dir",
        ] {
            assert!(schema.contains(key), "schema is missing {key}");
        }
    }
}
