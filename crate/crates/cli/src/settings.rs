use crate::CliError;
use asrlab::config::RunConfig;
use asrlab::model::Mode;
use asrlab::training::Profile;
use std::path::{Path, PathBuf};

/// Flags that override file values.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub profile: Option<String>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn file_profile(doc: &toml::Value) -> Result<Option<Profile>, CliError> {
    match doc.get("train").and_then(|t| t.get("profile")) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(s.parse()?)),
        Some(other) => Err(CliError::config(format!("train.profile must be a string, got {other}"))),
    }
}

/// Parses a config document over the defaults of its profile.
pub fn parse_config(text: &str, flag_profile: Option<Profile>) -> Result<RunConfig, CliError> {
    let doc: toml::Value = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
    let profile = flag_profile.or(file_profile(&doc)?).unwrap_or(Profile::Desk);
    let mut merged = toml::Value::try_from(RunConfig::for_profile(profile))
        .map_err(|e| CliError::config(e.to_string()))?;
    merge(&mut merged, doc);
    let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
    if let Some(p) = flag_profile {
        cfg.apply_profile(p);
    }
    Ok(cfg)
}

pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<RunConfig, CliError> {
    let flag_profile = flags.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("cannot read config {}: {e}", p.display())))?;
            parse_config(&text, flag_profile)?
        }
        None => RunConfig::for_profile(flag_profile.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
        cfg.corpus.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = &flags.mode {
        cfg.model.mode = mode.parse::<Mode>()?;
        if cfg.model.mode == Mode::Baseline {
            cfg.model.sememe_prediction = false;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &RunConfig) -> Result<String, CliError> {
    toml::to_string(cfg).map_err(|e| CliError::config(e.to_string()))
}

/// Writes the resolved config into `dir`.
pub fn echo(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), to_toml(cfg)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_reparses_equal() {
        for profile in [Profile::Desk, Profile::Paper] {
            let mut cfg = RunConfig::for_profile(profile);
            cfg.lexicon = Some("lex.txt".into());
            cfg.model.mode = Mode::Sep;
            let text = to_toml(&cfg).unwrap();
            assert_eq!(parse_config(&text, None).unwrap(), cfg);
        }
    }

    #[test]
    fn file_values_sit_on_profile_defaults() {
        let cfg = parse_config("[train]\nprofile = \"paper\"\nepochs = 3\n", None).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.warmup, cfg.model.d_model), (3, 25_000, 256));
        let cfg = parse_config("[model]\nmode = \"sp\"\n", None).unwrap();
        assert_eq!((cfg.model.mode, cfg.train.warmup), (Mode::Sp, 500));
    }

    #[test]
    fn flags_beat_file() {
        let cfg = parse_config("[train]\nepochs = 3\n", Some(Profile::Paper)).unwrap();
        assert_eq!(cfg.train.epochs, 240);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config("[train]\nepochz = 3\n", None).unwrap_err();
        assert_eq!(err.code, 2);
        assert!(err.message.contains("epochz"), "{}", err.message);
        let err = parse_config("colour = 1\n", None).unwrap_err();
        assert!(err.message.contains("colour"));
    }
}
