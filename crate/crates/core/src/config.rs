//! Network, training and numeric configuration.
//!
//! Every layer dimension is derived from [`NetConfig`] by [`NetConfig::derive`];
//! nothing downstream hard-codes a size. [`Settings`] bundles all three
//! configuration groups plus the class labels and knows how to read the
//! plain-text `KEY=VALUE` configuration format.

use std::fmt;
use std::path::Path;

use crate::error::ConfigError;

/// Number of input colour channels (RGB).
pub const INPUT_CHANNELS: usize = 3;

/// Reciprocal of 255 used for pixel normalisation, as a decimal literal.
/// In single precision it rounds to the same value as `1.0 / 255.0`.
pub const PIXEL_SCALE: f32 = 0.003921569;

/// Side of the square camera frame the device captures.
pub const DEFAULT_SOURCE_SIDE: usize = 240;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub input_size: usize,
    pub conv1_kernel: usize,
    pub conv1_filters: usize,
    pub conv2_kernel: usize,
    pub conv2_filters: usize,
    pub num_classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            conv1_kernel: 3,
            conv1_filters: 4,
            conv2_kernel: 3,
            conv2_filters: 8,
            num_classes: 3,
        }
    }
}

/// All sizes that follow from a [`NetConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DerivedDims {
    pub input_size: usize,
    pub input_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_filters: usize,
    pub conv1_out: usize,
    pub pool1_out: usize,
    pub conv2_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_out: usize,
    pub flattened: usize,
    pub num_classes: usize,
    pub conv1_weights: usize,
    pub conv1_biases: usize,
    pub conv2_weights: usize,
    pub conv2_biases: usize,
    pub output_weights: usize,
    pub output_biases: usize,
    pub total_params: usize,
}

impl NetConfig {
    pub fn with_input_size(input_size: usize) -> Self {
        Self {
            input_size,
            ..Self::default()
        }
    }

    /// Derives every layer dimension, rejecting shapes the fixed
    /// architecture cannot realise.
    pub fn derive(&self) -> Result<DerivedDims, ConfigError> {
        let dim = |msg: String| ConfigError::Dimension(msg);
        for (name, v) in [
            ("input_size", self.input_size),
            ("conv1_kernel", self.conv1_kernel),
            ("conv1_filters", self.conv1_filters),
            ("conv2_kernel", self.conv2_kernel),
            ("conv2_filters", self.conv2_filters),
        ] {
            if v == 0 {
                return Err(dim(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(dim(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.input_size < self.conv1_kernel + 1 {
            return Err(dim(format!(
                "input_size {} leaves conv1 output below 2 with kernel {}",
                self.input_size, self.conv1_kernel
            )));
        }
        let conv1_out = self.input_size - (self.conv1_kernel - 1);
        if !conv1_out.is_multiple_of(2) {
            return Err(dim(format!(
                "conv1 output {conv1_out} is odd; 2x2 pooling needs an even size"
            )));
        }
        let pool1_out = conv1_out / 2;
        if pool1_out < self.conv2_kernel {
            return Err(dim(format!(
                "pooled size {pool1_out} is smaller than conv2 kernel {}",
                self.conv2_kernel
            )));
        }
        let conv2_out = pool1_out - (self.conv2_kernel - 1);
        let flattened = conv2_out * conv2_out * self.conv2_filters;

        let conv1_weights =
            self.conv1_kernel * self.conv1_kernel * INPUT_CHANNELS * self.conv1_filters;
        let conv2_weights =
            self.conv2_kernel * self.conv2_kernel * self.conv1_filters * self.conv2_filters;
        let output_weights = flattened * self.num_classes;
        let total_params = conv1_weights
            + self.conv1_filters
            + conv2_weights
            + self.conv2_filters
            + output_weights
            + self.num_classes;

        Ok(DerivedDims {
            input_size: self.input_size,
            input_channels: INPUT_CHANNELS,
            conv1_kernel: self.conv1_kernel,
            conv1_filters: self.conv1_filters,
            conv1_out,
            pool1_out,
            conv2_kernel: self.conv2_kernel,
            conv2_filters: self.conv2_filters,
            conv2_out,
            flattened,
            num_classes: self.num_classes,
            conv1_weights,
            conv1_biases: self.conv1_filters,
            conv2_weights,
            conv2_biases: self.conv2_filters,
            output_weights,
            output_biases: self.num_classes,
            total_params,
        })
    }
}

impl DerivedDims {
    /// Length of the normalised RGB input tensor.
    pub fn input_len(&self) -> usize {
        self.input_size * self.input_size * self.input_channels
    }

    pub fn conv1_len(&self) -> usize {
        self.conv1_filters * self.conv1_out * self.conv1_out
    }

    pub fn pool1_len(&self) -> usize {
        self.conv1_filters * self.pool1_out * self.pool1_out
    }

    /// Per-layer parameter counts in persisted order:
    /// conv1 w, conv1 b, conv2 w, conv2 b, output w, output b.
    pub fn layer_counts(&self) -> [usize; 6] {
        [
            self.conv1_weights,
            self.conv1_biases,
            self.conv2_weights,
            self.conv2_biases,
            self.output_weights,
            self.output_biases,
        ]
    }

    /// Fan-in of the three weighted layers, used by He initialisation.
    pub fn fan_ins(&self) -> [usize; 3] {
        [
            self.conv1_kernel * self.conv1_kernel * self.input_channels,
            self.conv2_kernel * self.conv2_kernel * self.conv1_filters,
            self.flattened,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    // Optimiser hyperparameters are held in double precision: the
    // bias-corrected step size is evaluated in f64 and rounded once.
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_images: usize,
    pub shuffle_seed: u64,
    pub shuffle_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            batch_size: 6,
            epochs: 20,
            validation_images: 3,
            shuffle_seed: 42,
            shuffle_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| ConfigError::InvalidValue {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(bad("learning_rate", "must be a positive finite number"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(bad("beta1", "must lie strictly between 0 and 1"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(bad("beta2", "must lie strictly between 0 and 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(bad("epsilon", "must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(bad("epochs", "must be positive"));
        }
        Ok(())
    }
}

/// Clipping bounds and activation slope shared by the forward pass, the
/// backward pass and the optimiser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumericPolicy {
    pub grad_clip: f32,
    pub weight_clip: f32,
    pub preact_clip: f32,
    pub leaky_alpha: f32,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        Self {
            grad_clip: 100.0,
            weight_clip: 10.0,
            preact_clip: 100.0,
            leaky_alpha: 0.1,
        }
    }
}

impl NumericPolicy {
    pub fn pixel_scale(&self) -> f32 {
        PIXEL_SCALE
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, v) in [
            ("grad_clip", self.grad_clip),
            ("weight_clip", self.weight_clip),
            ("preact_clip", self.preact_clip),
            ("leaky_alpha", self.leaky_alpha),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ConfigError::InvalidValue {
                    key: key.to_string(),
                    reason: "must be a positive finite number".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Ordered class labels; position is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    labels: Vec<String>,
}

impl ClassMap {
    pub fn new<I, S>(labels: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.len() < 2 {
            return Err(ConfigError::Invalid(
                "at least two class labels are required".to_string(),
            ));
        }
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() {
                return Err(ConfigError::Invalid(format!("label {i} is empty")));
            }
            if labels[..i].contains(l) {
                return Err(ConfigError::Invalid(format!("duplicate label `{l}`")));
            }
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.labels.get(index).map(String::as_str)
    }
}

impl Default for ClassMap {
    fn default() -> Self {
        Self {
            labels: vec!["0Blank".into(), "1Cup".into(), "2Pen".into()],
        }
    }
}

/// Complete session configuration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub policy: NumericPolicy,
    pub classes: ClassMap,
}

/// Every key accepted by [`SettingsBuilder::set`] and the config file.
pub const KEYS: &[&str] = &[
    "input_size",
    "conv1_kernel",
    "conv1_filters",
    "conv2_kernel",
    "conv2_filters",
    "num_classes",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "batch_size",
    "epochs",
    "validation_images",
    "shuffle_seed",
    "shuffle_enabled",
    "grad_clip",
    "weight_clip",
    "preact_clip",
    "leaky_alpha",
    "labels",
];

/// Layered construction of [`Settings`]: defaults, then config-file lines,
/// then command-line overrides, all through the same `set` path.
#[derive(Debug, Clone, Default)]
pub struct SettingsBuilder {
    settings: Settings,
    labels: Option<Vec<String>>,
    num_classes_set: bool,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        reason: format!("`{value}`: {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(ConfigError::InvalidValue {
            key: key.to_string(),
            reason: format!("`{value}` is not a boolean"),
        }),
    }
}

impl SettingsBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<&mut Self, ConfigError> {
        let value = value.trim();
        let s = &mut self.settings;
        match key.trim() {
            "input_size" => s.net.input_size = parse_num(key, value)?,
            "conv1_kernel" => s.net.conv1_kernel = parse_num(key, value)?,
            "conv1_filters" => s.net.conv1_filters = parse_num(key, value)?,
            "conv2_kernel" => s.net.conv2_kernel = parse_num(key, value)?,
            "conv2_filters" => s.net.conv2_filters = parse_num(key, value)?,
            "num_classes" => {
                s.net.num_classes = parse_num(key, value)?;
                self.num_classes_set = true;
            }
            "learning_rate" => s.train.learning_rate = parse_num(key, value)?,
            "beta1" => s.train.beta1 = parse_num(key, value)?,
            "beta2" => s.train.beta2 = parse_num(key, value)?,
            "epsilon" => s.train.epsilon = parse_num(key, value)?,
            "batch_size" => s.train.batch_size = parse_num(key, value)?,
            "epochs" => s.train.epochs = parse_num(key, value)?,
            "validation_images" => s.train.validation_images = parse_num(key, value)?,
            "shuffle_seed" => s.train.shuffle_seed = parse_num(key, value)?,
            "shuffle_enabled" => s.train.shuffle_enabled = parse_bool(key, value)?,
            "grad_clip" => s.policy.grad_clip = parse_num(key, value)?,
            "weight_clip" => s.policy.weight_clip = parse_num(key, value)?,
            "preact_clip" => s.policy.preact_clip = parse_num(key, value)?,
            "leaky_alpha" => s.policy.leaky_alpha = parse_num(key, value)?,
            "labels" => {
                self.labels = Some(
                    value
                        .split(',')
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect(),
                )
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(self)
    }

    /// Applies `KEY=VALUE` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<&mut Self, ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: line.to_string(),
            })?;
            self.set(key, value)?;
        }
        Ok(self)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<&mut Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigError::Invalid(format!("cannot read config {}: {e}", path.display()))
        })?;
        self.apply_text(&text)
    }

    /// Validates everything and produces the final settings. When labels
    /// are given without an explicit class count, the count follows the
    /// labels.
    pub fn build(&self) -> Result<Settings, ConfigError> {
        let mut s = self.settings.clone();
        if let Some(labels) = &self.labels {
            if !self.num_classes_set {
                s.net.num_classes = labels.len();
            }
            s.classes = ClassMap::new(labels.iter().cloned())?;
        }
        if s.classes.len() != s.net.num_classes {
            return Err(ConfigError::Invalid(format!(
                "num_classes is {} but {} labels are configured",
                s.net.num_classes,
                s.classes.len()
            )));
        }
        s.net.derive()?;
        s.train.validate()?;
        s.policy.validate()?;
        Ok(s)
    }
}

impl Settings {
    pub fn dims(&self) -> DerivedDims {
        // Settings are only constructed through validated paths.
        self.net
            .derive()
            .expect("settings hold a validated network configuration")
    }

    /// Renders the settings in the `KEY=VALUE` file format.
    pub fn to_config_text(&self) -> String {
        let n = &self.net;
        let t = &self.train;
        let p = &self.policy;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("input_size", n.input_size.to_string());
        kv("conv1_kernel", n.conv1_kernel.to_string());
        kv("conv1_filters", n.conv1_filters.to_string());
        kv("conv2_kernel", n.conv2_kernel.to_string());
        kv("conv2_filters", n.conv2_filters.to_string());
        kv("num_classes", n.num_classes.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("epsilon", t.epsilon.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("validation_images", t.validation_images.to_string());
        kv("shuffle_seed", t.shuffle_seed.to_string());
        kv("shuffle_enabled", t.shuffle_enabled.to_string());
        kv("grad_clip", p.grad_clip.to_string());
        kv("weight_clip", p.weight_clip.to_string());
        kv("preact_clip", p.preact_clip.to_string());
        kv("leaky_alpha", p.leaky_alpha.to_string());
        kv("labels", self.classes.labels().join(","));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(input_size: usize) -> DerivedDims {
        NetConfig::with_input_size(input_size).derive().unwrap()
    }

    #[test]
    fn default_shape_counts() {
        let d = counts(64);
        assert_eq!((d.conv1_out, d.pool1_out, d.conv2_out), (62, 31, 29));
        assert_eq!(d.flattened, 6728);
        assert_eq!(d.layer_counts(), [108, 4, 288, 8, 20184, 3]);
        assert_eq!(d.total_params, 20595);
    }

    #[test]
    fn smaller_shapes() {
        let d = counts(48);
        assert_eq!((d.conv1_out, d.pool1_out, d.conv2_out), (46, 23, 21));
        assert_eq!(d.flattened, 3528);
        assert_eq!(d.total_params, 10995);

        let d = counts(8);
        assert_eq!((d.conv1_out, d.pool1_out, d.conv2_out), (6, 3, 1));
        assert_eq!(d.flattened, 8);
        assert_eq!(d.total_params, 435);
    }

    #[test]
    fn odd_conv1_output_rejected() {
        assert!(matches!(
            NetConfig::with_input_size(5).derive(),
            Err(ConfigError::Dimension(_))
        ));
        assert!(NetConfig::with_input_size(2).derive().is_err());
        assert!(NetConfig::with_input_size(0).derive().is_err());
        // 6 -> conv1 4 -> pool 2 < kernel 3
        assert!(NetConfig::with_input_size(6).derive().is_err());
    }

    #[test]
    fn total_is_independent_resum() {
        for size in (8..200).step_by(2) {
            let d = counts(size);
            let resum: usize = d.layer_counts().iter().sum();
            assert_eq!(resum, d.total_params);
            assert_eq!(d, counts(size));
        }
    }

    #[test]
    fn config_text_layers() {
        let mut b = SettingsBuilder::new();
        b.apply_text("# comment\ninput_size = 48\n\nepochs=5\nlabels=a, b ,c,d\n")
            .unwrap();
        b.set("batch_size", "4").unwrap();
        let s = b.build().unwrap();
        assert_eq!(s.net.input_size, 48);
        assert_eq!(s.net.num_classes, 4);
        assert_eq!(s.train.epochs, 5);
        assert_eq!(s.train.batch_size, 4);
        assert_eq!(s.classes.labels(), &["a", "b", "c", "d"]);

        let round = {
            let mut b = SettingsBuilder::new();
            b.apply_text(&s.to_config_text()).unwrap();
            b.build().unwrap()
        };
        assert_eq!(round, s);
    }

    #[test]
    fn config_errors() {
        let mut b = SettingsBuilder::new();
        assert!(matches!(
            b.apply_text("bogus=1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            SettingsBuilder::new().apply_text("input_size"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(SettingsBuilder::new().set("epochs", "many").is_err());

        let mut b = SettingsBuilder::new();
        b.set("num_classes", "4").unwrap();
        assert!(b.build().is_err());

        let mut b = SettingsBuilder::new();
        b.set("beta1", "1.0").unwrap();
        assert!(b.build().is_err());

        let mut b = SettingsBuilder::new();
        b.set("labels", "a,a").unwrap();
        assert!(b.build().is_err());
    }
}
