//! One `--flag` per training config key, collected into a key=value map.

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches};
use crossgan::kv::KvMap;
use crossgan::train::config::CONFIG_KEYS;

pub fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

#[derive(Clone, Debug, Default)]
pub struct ConfigFlags(pub KvMap);

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        let mut kv = KvMap::new();
        for key in CONFIG_KEYS {
            if let Some(v) = m.get_one::<String>(key) {
                kv.set(key, v);
            }
        }
        Ok(Self(kv))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        CONFIG_KEYS.iter().fold(cmd, |cmd, key| {
            cmd.arg(
                Arg::new(*key)
                    .long(flag_name(key))
                    .value_name("VALUE")
                    .help_heading("Config overrides")
                    .help(format!("overrides `{key}` from the config file")),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
