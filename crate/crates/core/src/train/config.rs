//! Line-oriented `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Lists are comma separated and
//! may be wrapped in brackets. Unknown or repeated keys are errors.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::network::NetworkConfig;
use crate::pagf::PagfMode;
use crate::params::ParamGroup;

use super::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    /// Share of the dataset used for training; the rest validates.
    pub train_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::desk(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train_fraction: 0.8,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim();
    let v = v.strip_prefix('[').and_then(|s| s.strip_suffix(']')).unwrap_or(v);
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_array<T: FromStr + Copy, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items = parse_list::<T>(key, v)?;
    items
        .as_slice()
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` needs exactly {N} values, got {}", items.len())))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected true or false, got `{other}`"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction {} outside (0, 1)",
                self.train_fraction
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.network;
        let o = &mut self.optim;
        match key {
            "embed_dims" => n.embed_dims = parse_array(key, value)?,
            "man_depths" => n.man_depths = parse_array(key, value)?,
            "msab_kernels" => n.msab_kernels = parse_list(key, value)?,
            "use_msab" => n.use_msab = parse_bool(key, value)?,
            "grid_size" => n.grid_size = parse_num(key, value)?,
            "spline_order" => n.spline_order = parse_num(key, value)?,
            "grid_range" => {
                let [lo, hi] = parse_array(key, value)?;
                n.grid_range = (lo, hi);
            }
            "pagf_mode" => n.pagf_mode = value.trim().parse::<PagfMode>()?,
            "drop_path" => n.drop_path = parse_num(key, value)?,
            "num_classes" => n.num_classes = parse_num(key, value)?,
            "input_channels" => n.input_channels = parse_num(key, value)?,
            "lambda_dice" => self.loss.lambda_dice = parse_num(key, value)?,
            "lambda_bce" => self.loss.lambda_bce = parse_num(key, value)?,
            "smooth" => self.loss.smooth = parse_num(key, value)?,
            "threshold" => self.loss.threshold = parse_num(key, value)?,
            "base_lr" => o.base_lr = parse_num(key, value)?,
            "beta1" => o.beta1 = parse_num(key, value)?,
            "beta2" => o.beta2 = parse_num(key, value)?,
            "eps" => o.eps = parse_num(key, value)?,
            "weight_decay" => o.weight_decay = parse_num(key, value)?,
            "epochs" => o.epochs = parse_num(key, value)?,
            "batch_size" => o.batch_size = parse_num(key, value)?,
            "seed" => o.seed = parse_num(key, value)?,
            "augment" => o.augment = parse_bool(key, value)?,
            "train_fraction" => self.train_fraction = parse_num(key, value)?,
            _ => match key.strip_prefix("lr_mult.") {
                Some(group) => {
                    let g: ParamGroup = group
                        .parse()
                        .map_err(|_| Error::Config(format!("unknown parameter group in `{key}`")))?;
                    o.lr_mult.insert(g, parse_num(key, value)?);
                }
                None => return Err(Error::Config(format!("unknown key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults and validates it.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |e: Error| match e {
                Error::Config(m) | Error::InvalidArgument(m) => Error::Config(format!("line {}: {m}", i + 1)),
                other => other,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
            }
            cfg.set(key, value).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key, in a form [`RunConfig::parse`] reads back identically.
    pub fn to_text(&self) -> String {
        let n = &self.network;
        let o = &self.optim;
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("embed_dims", join(&n.embed_dims));
        kv("man_depths", join(&n.man_depths));
        kv("msab_kernels", join(&n.msab_kernels));
        kv("use_msab", n.use_msab.to_string());
        kv("grid_size", n.grid_size.to_string());
        kv("spline_order", n.spline_order.to_string());
        kv("grid_range", join(&[n.grid_range.0, n.grid_range.1]));
        kv("pagf_mode", n.pagf_mode.as_str().to_string());
        kv("drop_path", n.drop_path.to_string());
        kv("num_classes", n.num_classes.to_string());
        kv("input_channels", n.input_channels.to_string());
        kv("lambda_dice", l.lambda_dice.to_string());
        kv("lambda_bce", l.lambda_bce.to_string());
        kv("smooth", l.smooth.to_string());
        kv("threshold", l.threshold.to_string());
        kv("base_lr", o.base_lr.to_string());
        for g in ParamGroup::ALL {
            kv(&format!("lr_mult.{g}"), o.multiplier(g).to_string());
        }
        kv("beta1", o.beta1.to_string());
        kv("beta2", o.beta2.to_string());
        kv("eps", o.eps.to_string());
        kv("weight_decay", o.weight_decay.to_string());
        kv("epochs", o.epochs.to_string());
        kv("batch_size", o.batch_size.to_string());
        kv("seed", o.seed.to_string());
        kv("augment", o.augment.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        // explicit 1.0 multipliers are written out; compare effective rates
        for g in ParamGroup::ALL {
            assert_eq!(back.optim.lr(g), c.optim.lr(g));
        }
        assert_eq!(back.network, c.network);
        assert_eq!(back.loss, c.loss);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn parses_comments_lists_and_groups() {
        let c = RunConfig::parse(
            "# overfit run\n\
             embed_dims = [4, 8, 16, 20, 32]\n\
             msab_kernels = 3   # single scale\n\
             pagf_mode = no_gate\n\
             lr_mult.pagf = 0\n\
             augment = false\n\
             grid_range = -2, 2\n",
        )
        .unwrap();
        assert_eq!(c.network.embed_dims, [4, 8, 16, 20, 32]);
        assert_eq!(c.network.msab_kernels, vec![3]);
        assert_eq!(c.network.pagf_mode, PagfMode::NoGate);
        assert_eq!(c.optim.multiplier(ParamGroup::Pagf), 0.0);
        assert_eq!(c.optim.multiplier(ParamGroup::Kan), 0.1);
        assert!(!c.optim.augment);
        assert_eq!(c.network.grid_range, (-2.0, 2.0));
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("epochs = 3\nlearning_rate = 1").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("learning_rate"));
        assert!(RunConfig::parse("epochs = 3\nepochs = 4").is_err());
        assert!(RunConfig::parse("epochs 3").is_err());
        assert!(RunConfig::parse("embed_dims = 1, 2").is_err());
        assert!(RunConfig::parse("lr_mult.encoder = 1").is_err());
        assert!(RunConfig::parse("use_msab = maybe").is_err());
        assert!(RunConfig::parse("train_fraction = 1").is_err());
        assert!(RunConfig::parse("msab_kernels = 2").is_err());
    }
}
