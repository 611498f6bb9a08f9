//! Weight initialisation and persistence.
//!
//! Two on-disk forms are written after training:
//!
//! * `myWeights.bin`: the six arrays (conv1 w, conv1 b, conv2 w, conv2 b,
//!   output w, output b) as little-endian IEEE-754 binary32, concatenated,
//!   no header or padding. Size is exactly `total_params * 4` bytes.
//! * `myWeights.h`: a C header declaring the same six arrays as
//!   `const float myModel_<name>[]`, every value printed with nine
//!   significant digits so it re-parses to the identical `f32`.
//!
//! At start-up weights come from the first available tier: a binary file,
//! then a build-embedded ("baked") set, then He initialisation.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ClassMap, DerivedDims};
use crate::error::{Error, WeightError};
use crate::params::{ParamSet, ARRAY_NAMES};

pub const BINARY_FILE: &str = "myWeights.bin";
pub const HEADER_FILE: &str = "myWeights.h";
pub const WEIGHTS_DIR: &str = "header";

/// Default weight directory under a data root, mirroring the device SD card.
pub fn default_weights_dir(data_root: &Path) -> PathBuf {
    data_root.join(WEIGHTS_DIR)
}

pub type WeightSet = ParamSet;

/// Where the session's weights came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightOrigin {
    FromBinary(PathBuf),
    FromBaked(String),
    FromHeInit { seed: u64 },
}

impl WeightOrigin {
    /// The session banner the device prints at start-up.
    pub fn banner(&self) -> &'static str {
        match self {
            WeightOrigin::FromHeInit { .. } => "Starting fresh training",
            _ => "Continuing from saved weights",
        }
    }

    pub fn describe(&self) -> String {
        match self {
            WeightOrigin::FromBinary(p) => format!("binary {}", p.display()),
            WeightOrigin::FromBaked(id) => format!("baked-in {id}"),
            WeightOrigin::FromHeInit { seed } => format!("He init (seed {seed})"),
        }
    }
}

/// He (Gaussian) initialisation: weights ~ N(0, sqrt(2 / fan_in)), biases
/// zero. Layers draw from one seeded stream in persisted order.
pub fn he_init(dims: &DerivedDims, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ParamSet::zeros(dims);
    let fans = dims.fan_ins();
    for (arr, fan_in) in [&mut w.conv1_w, &mut w.conv2_w, &mut w.output_w]
        .into_iter()
        .zip(fans)
    {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive standard deviation");
        for v in arr.iter_mut() {
            let x: f64 = normal.sample(&mut rng);
            *v = (x as f32).clamp(-10.0, 10.0);
        }
    }
    w
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WeightError + '_ {
    move |source| WeightError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn to_le_bytes(weights: &WeightSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(weights.len() * 4);
    for arr in weights.arrays() {
        for v in arr {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_le_bytes(dims: &DerivedDims, bytes: &[u8]) -> Result<WeightSet, Error> {
    if bytes.len() != dims.total_params * 4 {
        return Err(Error::Shape {
            name: "weight bytes",
            expected: dims.total_params * 4,
            actual: bytes.len(),
        });
    }
    let flat: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    ParamSet::from_flat(dims, &flat)
}

pub fn save_binary(weights: &WeightSet, path: &Path) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, to_le_bytes(weights)).map_err(io_err(path))?;
    Ok(())
}

pub fn load_binary(path: &Path, dims: &DerivedDims) -> Result<WeightSet, Error> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = dims.total_params as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(WeightError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
            params: dims.total_params,
        }
        .into());
    }
    from_le_bytes(dims, &bytes)
}

/// Formats like C's `%.9g`, which round-trips every finite `f32`.
pub fn format_g9(v: f32) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.8e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, v);
        trim_fraction(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_fraction(mantissa), sign, exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const VALUES_PER_LINE: usize = 8;

/// Renders the C header text. Output is byte-stable for identical input.
pub fn render_header(weights: &WeightSet, dims: &DerivedDims, labels: &ClassMap) -> String {
    let mut s = String::new();
    let quoted: Vec<String> = labels.labels().iter().map(|l| format!("\"{l}\"")).collect();
    let _ = writeln!(
        s,
        "// Auto-generated by {} v{}",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION")
    );
    let _ = writeln!(s, "//   #define NUM_CLASSES {}", dims.num_classes);
    let _ = writeln!(
        s,
        "//   String myClassLabels[] = {{{}}};",
        quoted.join(", ")
    );
    let _ = writeln!(s, "// To use: copy to sketch folder, then uncomment:");
    let _ = writeln!(s, "//   #define USE_BAKED_WEIGHTS");
    let _ = writeln!(
        s,
        "// Network: INPUT_SIZE {} | conv1 {}x{}x{} | conv2 {}x{}x{} | flattened {} | {} parameters",
        dims.input_size,
        dims.conv1_filters,
        dims.conv1_kernel,
        dims.conv1_kernel,
        dims.conv2_filters,
        dims.conv2_kernel,
        dims.conv2_kernel,
        dims.flattened,
        dims.total_params
    );
    let _ = writeln!(s, "#pragma once");
    for (name, arr) in ARRAY_NAMES.iter().zip(weights.arrays()) {
        let _ = writeln!(s);
        let _ = writeln!(s, "// {} values", arr.len());
        let _ = writeln!(s, "const float myModel_{name}[] = {{");
        for line in arr.chunks(VALUES_PER_LINE) {
            let vals: Vec<String> = line
                .iter()
                .map(|&v| {
                    let t = format_g9(v);
                    if v == 0.0 {
                        t
                    } else {
                        t + "f"
                    }
                })
                .collect();
            let _ = writeln!(s, "  {},", vals.join(", "));
        }
        let _ = writeln!(s, "}};");
    }
    s
}

pub fn export_header(
    weights: &WeightSet,
    dims: &DerivedDims,
    labels: &ClassMap,
    path: &Path,
) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    fs::write(path, render_header(weights, dims, labels)).map_err(io_err(path))?;
    Ok(())
}

/// Reads the six `myModel_*` arrays back out of header text.
pub fn parse_header(text: &str, dims: &DerivedDims) -> Result<WeightSet, Error> {
    let perr = |m: String| Error::from(WeightError::HeaderParse(m));
    let mut set = ParamSet::zeros(dims);
    for (name, arr) in ARRAY_NAMES.iter().zip(set.arrays_mut()) {
        let decl = format!("myModel_{name}[]");
        let start = text
            .find(&decl)
            .ok_or_else(|| perr(format!("array myModel_{name} not found")))?;
        let body_start = start
            + text[start..]
                .find('{')
                .ok_or_else(|| perr(format!("myModel_{name}: missing `{{`")))?
            + 1;
        let body_end = body_start
            + text[body_start..]
                .find('}')
                .ok_or_else(|| perr(format!("myModel_{name}: missing `}}`")))?;
        let values: Vec<f32> = text[body_start..body_end]
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.trim_end_matches(['f', 'F'])
                    .parse::<f32>()
                    .map_err(|e| perr(format!("myModel_{name}: `{t}`: {e}")))
            })
            .collect::<Result<_, _>>()?;
        if values.len() != arr.len() {
            return Err(perr(format!(
                "myModel_{name}: {} values, expected {}",
                values.len(),
                arr.len()
            )));
        }
        arr.copy_from_slice(&values);
    }
    Ok(set)
}

/// A build-embedded weight blob in the binary format.
#[derive(Debug, Clone, Copy)]
pub struct BakedWeights<'a> {
    pub id: &'a str,
    pub bytes: &'a [u8],
}

/// Three-tier weight resolution: binary file, baked-in set, He init.
///
/// A binary file that exists but has the wrong size is an error; it never
/// falls through to a lower tier.
pub fn resolve_weights(
    binary_path: Option<&Path>,
    baked: Option<BakedWeights<'_>>,
    dims: &DerivedDims,
    seed: u64,
) -> Result<(WeightSet, WeightOrigin), Error> {
    if let Some(path) = binary_path {
        if path.is_file() {
            let w = load_binary(path, dims)?;
            return Ok((w, WeightOrigin::FromBinary(path.to_path_buf())));
        }
    }
    if let Some(baked) = baked {
        if baked.bytes.len() != dims.total_params * 4 {
            return Err(WeightError::BakedSizeMismatch {
                expected: dims.total_params * 4,
                actual: baked.bytes.len(),
            }
            .into());
        }
        let w = from_le_bytes(dims, baked.bytes)?;
        return Ok((w, WeightOrigin::FromBaked(baked.id.to_string())));
    }
    Ok((he_init(dims, seed), WeightOrigin::FromHeInit { seed }))
}

/// Summary statistics of one parameter array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayStats {
    pub len: usize,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub std: f64,
}

pub fn array_stats(values: &[f32]) -> ArrayStats {
    let n = values.len();
    if n == 0 {
        return ArrayStats {
            len: 0,
            min: 0.0,
            max: 0.0,
            mean: 0.0,
            std: 0.0,
        };
    }
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = values
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    ArrayStats {
        len: n,
        min: values.iter().copied().fold(f32::INFINITY, f32::min),
        max: values.iter().copied().fold(f32::NEG_INFINITY, f32::max),
        mean,
        std: var.sqrt(),
    }
}
