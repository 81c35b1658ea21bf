use std::path::Path;

use crate::error::{Error, Result};
use crate::model::LossConfig;

/// Training hyper-parameters. Serialised as `key = value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reg: bool,
    pub ad: bool,
    pub cpt: bool,
    pub zoom: bool,
    /// Train in 64-bit floats.
    pub f64: bool,
    /// Factor applied to the learning rate every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Encoder output channels per block (raw-image bundles only).
    pub channels: Vec<usize>,
    /// Calibration used for generalized evaluation of this model.
    pub gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.2,
            lambda2: 0.01,
            lambda3: 0.2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 30,
            batch_size: 32,
            seed: 7,
            reg: true,
            ad: true,
            cpt: true,
            zoom: true,
            f64: false,
            lr_decay: 0.9,
            lr_decay_every: 10,
            channels: vec![16, 32, 64],
            gamma: 0.7,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_reg: self.lambda1,
            lambda_ad: self.lambda2,
            lambda_cpt: self.lambda3,
            reg: self.reg,
            ad: self.ad,
            cpt: self.cpt,
            zoom: self.zoom,
        }
    }

    /// Global branch only: every prototype loss and the zoom branch disabled.
    pub fn base_only(mut self) -> Self {
        self.reg = false;
        self.ad = false;
        self.cpt = false;
        self.zoom = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return bad("lr_decay must be positive and lr_decay_every at least 1".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!(
                "channels must be positive, got {:?}",
                self.channels
            ));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<N: std::str::FromStr>(v: &str) -> std::result::Result<N, String> {
            v.parse().map_err(|_| format!("invalid number `{v}`"))
        }
        fn flag(v: &str) -> std::result::Result<bool, String> {
            parse_bool(v).ok_or_else(|| format!("invalid boolean `{v}`"))
        }
        match key {
            "lambda1" => self.lambda1 = num(value)?,
            "lambda2" => self.lambda2 = num(value)?,
            "lambda3" => self.lambda3 = num(value)?,
            "lr" => self.lr = num(value)?,
            "beta1" => self.beta1 = num(value)?,
            "beta2" => self.beta2 = num(value)?,
            "epochs" => self.epochs = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "seed" => self.seed = num(value)?,
            "reg" => self.reg = flag(value)?,
            "ad" => self.ad = flag(value)?,
            "cpt" => self.cpt = flag(value)?,
            "zoom" => self.zoom = flag(value)?,
            "f64" => self.f64 = flag(value)?,
            "lr_decay" => self.lr_decay = num(value)?,
            "lr_decay_every" => self.lr_decay_every = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "channels" => {
                self.channels = value
                    .split(',')
                    .map(|c| num(c.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses config text over the defaults. `path` is only used in errors.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn to_text(&self) -> String {
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        format!(
            "lambda1 = {}\nlambda2 = {}\nlambda3 = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\n\
             epochs = {}\nbatch_size = {}\nseed = {}\nreg = {}\nad = {}\ncpt = {}\nzoom = {}\n\
             f64 = {}\nlr_decay = {}\nlr_decay_every = {}\nchannels = {}\ngamma = {}\n",
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lr,
            self.beta1,
            self.beta2,
            self.epochs,
            self.batch_size,
            self.seed,
            self.reg,
            self.ad,
            self.cpt,
            self.zoom,
            self.f64,
            self.lr_decay,
            self.lr_decay_every,
            channels.join(","),
            self.gamma,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let cfg = TrainConfig {
            lambda1: 0.1,
            zoom: false,
            channels: vec![4, 4],
            ..TrainConfig::default()
        };
        assert_eq!(
            TrainConfig::from_text(&cfg.to_text(), Path::new("c")).unwrap(),
            cfg
        );
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err =
            TrainConfig::from_text("# c\nlr = 0.01\nmomentum = 0.9\n", Path::new("train.cfg"))
                .unwrap_err();
        match err {
            Error::Parse { line, detail, .. } => {
                assert_eq!(line, 3);
                assert!(detail.contains("momentum"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_lambda_invalid() {
        let cfg = TrainConfig {
            lambda2: -0.1,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
