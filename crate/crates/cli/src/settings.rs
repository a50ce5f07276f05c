use std::path::Path;

use affwild::model::{Head, ModelConfig};
use affwild::train::{EvalMode, Freeze, LossKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Keys accepted in a `--config` TOML file. Each mirrors the flag of the
/// same name; `model` holds the full network description.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seqlen: Option<usize>,
    pub epochs: Option<usize>,
    pub loss: Option<LossKind>,
    pub mode: Option<EvalMode>,
    pub freeze: Option<Freeze>,
    pub targets: Option<String>,
    pub tolerance: Option<f64>,
    pub head: Option<Head>,
    pub model: Option<ModelConfig>,
}

impl FileConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(1);
            CliError::Usage(format!("{}:{line}: {}", path.display(), e.message()))
        })
    }
}

/// Flag values as given on the command line; `None` when absent.
#[derive(Clone, Debug, Default)]
pub struct Flags {
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seqlen: Option<usize>,
    pub epochs: Option<usize>,
    pub loss: Option<LossKind>,
    pub mode: Option<EvalMode>,
    pub freeze: Option<Freeze>,
    pub targets: Option<String>,
    pub tolerance: Option<f64>,
    pub head: Option<Head>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Flag,
    Config,
    Random,
}

/// Effective values after `flag > file > default` resolution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub seed_source: SeedSource,
    pub lr: f64,
    pub batch: usize,
    pub seqlen: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub mode: EvalMode,
    pub freeze: Freeze,
    pub targets: Option<[f64; 4]>,
    pub tolerance: f64,
    pub head: Option<Head>,
    pub model: ModelConfig,
}

pub const DEFAULT_TOLERANCE: f64 = 0.02;

/// `v+a+,v-a+,v+a-,v-a-` proportions, as fractions or percentages.
pub fn parse_targets(s: &str) -> Result<[f64; 4], CliError> {
    let bad = |why: &str| CliError::Usage(format!("--targets {s:?}: {why}"));
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("expected four comma-separated numbers"))?;
    let mut t: [f64; 4] = parts
        .try_into()
        .map_err(|_| bad("expected four comma-separated numbers"))?;
    if t.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(bad("proportions must be non-negative"));
    }
    let sum: f64 = t.iter().sum();
    if (sum - 100.0).abs() < 1e-6 {
        t.iter_mut().for_each(|v| *v /= 100.0);
    } else if (sum - 1.0).abs() > 1e-6 {
        return Err(bad("proportions must sum to 1 (or 100)"));
    }
    Ok(t)
}

impl Settings {
    pub fn resolve(flags: Flags, config: Option<&Path>) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => FileConfig::read(p)?,
            None => FileConfig::default(),
        };
        let (seed, seed_source) = match (flags.seed, file.seed) {
            (Some(s), _) => (s, SeedSource::Flag),
            (None, Some(s)) => (s, SeedSource::Config),
            (None, None) => (rand::random::<u32>() as u64, SeedSource::Random),
        };
        let targets = flags
            .targets
            .or(file.targets)
            .map(|t| parse_targets(&t))
            .transpose()?;
        let s = Settings {
            seed,
            seed_source,
            lr: flags.lr.or(file.lr).unwrap_or(1e-4),
            batch: flags.batch.or(file.batch).unwrap_or(4),
            seqlen: flags.seqlen.or(file.seqlen).unwrap_or(80),
            epochs: flags.epochs.or(file.epochs).unwrap_or(10),
            loss: flags.loss.or(file.loss).unwrap_or(LossKind::Ccc),
            mode: flags.mode.or(file.mode).unwrap_or(EvalMode::PerVideo),
            freeze: flags.freeze.or(file.freeze).unwrap_or_default(),
            targets,
            tolerance: flags
                .tolerance
                .or(file.tolerance)
                .unwrap_or(DEFAULT_TOLERANCE),
            head: flags.head.or(file.head),
            model: file.model.unwrap_or_else(ModelConfig::desk_default),
        };
        if !(s.lr.is_finite() && s.lr >= 0.0) {
            return Err(CliError::Usage(format!(
                "--lr {} must be a non-negative number",
                s.lr
            )));
        }
        if s.batch == 0 || s.seqlen == 0 || s.epochs == 0 {
            return Err(CliError::Usage(
                "--batch, --seqlen and --epochs must be at least 1".into(),
            ));
        }
        if !(s.tolerance > 0.0 && s.tolerance < 1.0) {
            return Err(CliError::Usage(format!(
                "--tolerance {} must lie in (0, 1)",
                s.tolerance
            )));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_accept_fractions_and_percentages() {
        assert_eq!(
            parse_targets("43,24,19,14").unwrap(),
            [0.43, 0.24, 0.19, 0.14]
        );
        assert_eq!(parse_targets("0.25, 0.25,0.25,0.25").unwrap(), [0.25; 4]);
        for bad in ["0.5,0.5", "0.5,0.5,0.5,0.5", "a,b,c,d", "-0.1,0.6,0.3,0.2"] {
            assert!(parse_targets(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "lr = 0.01\nbatch = 8\nseed = 5\nmode = \"concat\"\n").unwrap();
        let flags = Flags {
            lr: Some(0.5),
            ..Flags::default()
        };
        let s = Settings::resolve(flags, Some(&path)).unwrap();
        assert_eq!((s.lr, s.batch, s.seqlen), (0.5, 8, 80));
        assert_eq!((s.seed, s.seed_source), (5, SeedSource::Config));
        assert_eq!(s.mode, EvalMode::Concatenated);
        assert_eq!(s.model, ModelConfig::desk_default());
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "lr = 0.01\nlearning_rate = 3\n").unwrap();
        let err = Settings::resolve(Flags::default(), Some(&path)).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
