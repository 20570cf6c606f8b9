//! SAE weight bundles: loading with validation, and addressing by site.
//!
//! A bundle directory holds one `manifest.json` plus one raw tensor file per
//! array. Tensor files are little-endian `f32` in row-major order, named
//! `<layer>_<site>_<tensor>.f32` for dictionaries and `model_<name>.f32` for
//! toy-model weights.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toymodel::{ToyConfig, ToyTransformer};

/// Columns with an L2 norm below this are treated as dead features.
pub const DEGENERATE_NORM: f64 = 1e-8;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Res,
    Mlp,
    Att,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::Res, Site::Mlp, Site::Att];

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Res => "res",
            Site::Mlp => "mlp",
            Site::Att => "att",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "res" | "resid" | "residual" => Ok(Site::Res),
            "mlp" => Ok(Site::Mlp),
            "att" | "attn" | "attention" => Ok(Site::Att),
            other => Err(Error::invalid(format!("unknown site `{other}`"))),
        }
    }
}

/// Address of a dictionary / hook point: a layer and one of its three sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SitePosition {
    pub layer: usize,
    pub site: Site,
}

impl SitePosition {
    pub const fn new(layer: usize, site: Site) -> Self {
        Self { layer, site }
    }

    pub const fn res(layer: usize) -> Self {
        Self::new(layer, Site::Res)
    }

    pub const fn mlp(layer: usize) -> Self {
        Self::new(layer, Site::Mlp)
    }

    pub const fn att(layer: usize) -> Self {
        Self::new(layer, Site::Att)
    }

    fn file_stem(&self) -> String {
        format!("{}_{}", self.layer, self.site)
    }
}

impl fmt::Display for SitePosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.layer, self.site)
    }
}

/// A single feature: position plus index into that dictionary.
/// Parses from `layer:site:index` or `layer/site/index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureId {
    pub layer: usize,
    pub site: Site,
    pub index: usize,
}

impl FeatureId {
    pub const fn new(position: SitePosition, index: usize) -> Self {
        Self {
            layer: position.layer,
            site: position.site,
            index,
        }
    }

    pub const fn position(&self) -> SitePosition {
        SitePosition::new(self.layer, self.site)
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.layer, self.site, self.index)
    }
}

impl FromStr for FeatureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split([':', '/']).collect();
        if parts.len() != 3 {
            return Err(Error::invalid(format!(
                "feature id `{s}` must look like layer:site:index"
            )));
        }
        let layer = parts[0]
            .parse()
            .map_err(|_| Error::invalid(format!("bad layer in `{s}`")))?;
        let site = parts[1].parse()?;
        let index = parts[2]
            .parse()
            .map_err(|_| Error::invalid(format!("bad index in `{s}`")))?;
        Ok(Self { layer, site, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "k", rename_all = "lowercase")]
pub enum ActivationKind {
    JumpRelu,
    TopK(usize),
    BatchTopK(usize),
    Relu,
}

impl ActivationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::JumpRelu => "jumprelu",
            ActivationKind::TopK(_) => "topk",
            ActivationKind::BatchTopK(_) => "batchtopk",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn k(&self) -> Option<usize> {
        match *self {
            ActivationKind::TopK(k) | ActivationKind::BatchTopK(k) => Some(k),
            _ => None,
        }
    }

    fn from_parts(name: &str, k: Option<usize>) -> Result<Self> {
        let need_k = || k.ok_or_else(|| Error::Manifest(format!("activation `{name}` requires k")));
        Ok(match name {
            "jumprelu" => ActivationKind::JumpRelu,
            "relu" => ActivationKind::Relu,
            "topk" => ActivationKind::TopK(need_k()?),
            "batchtopk" => ActivationKind::BatchTopK(need_k()?),
            other => return Err(Error::Manifest(format!("unknown activation kind `{other}`"))),
        })
    }
}

/// Unit-norm decoder columns, stored feature-major (`D × d`) in `f64` so every
/// similarity is accumulated in double precision.
#[derive(Debug, Clone)]
pub struct NormalizedColumns {
    pub rows: Array2<f64>,
    pub degenerate: Vec<bool>,
}

impl NormalizedColumns {
    pub fn n_features(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&x| x).count()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        !self.degenerate[i]
    }
}

#[derive(Debug, Clone)]
pub struct ColumnNormalization {
    pub matrix: Array2<f64>,
    pub degenerate: Vec<usize>,
}

/// Scale every column of `m` to unit L2 norm. Columns with norm below
/// [`DEGENERATE_NORM`] become exactly zero and are reported.
pub fn normalize_columns(m: ArrayView2<'_, f64>) -> ColumnNormalization {
    let mut matrix = m.to_owned();
    let mut degenerate = Vec::new();
    for (j, mut col) in matrix.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            col.fill(0.0);
            degenerate.push(j);
        } else {
            col.mapv_inplace(|x| x / norm);
        }
    }
    ColumnNormalization { matrix, degenerate }
}

/// One SAE (or transcoder) at one position.
#[derive(Debug, Clone)]
pub struct FeatureDictionary {
    position: SitePosition,
    decoder: Array2<f32>,
    encoder: Array2<f32>,
    enc_bias: Array1<f32>,
    dec_bias: Array1<f32>,
    thresholds: Option<Array1<f32>>,
    activation: ActivationKind,
    folded: bool,
    normalized: OnceLock<NormalizedColumns>,
}

impl FeatureDictionary {
    /// `decoder` is `d × D`, `encoder` is `D × d`.
    pub fn new(
        position: SitePosition,
        decoder: Array2<f32>,
        encoder: Array2<f32>,
        enc_bias: Array1<f32>,
        dec_bias: Array1<f32>,
        thresholds: Option<Array1<f32>>,
        activation: ActivationKind,
    ) -> Result<Self> {
        let (d, n) = decoder.dim();
        if d == 0 || n == 0 {
            return Err(Error::invalid(format!("{position}: empty dictionary ({d}×{n})")));
        }
        let check = |name: &str, expected: usize, found: usize| {
            if expected == found {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    tensor: format!("{}_{name}", position.file_stem()),
                    expected,
                    found,
                })
            }
        };
        check("encoder", n * d, encoder.len())?;
        if encoder.dim() != (n, d) {
            return Err(Error::ShapeMismatch {
                tensor: format!("{}_encoder", position.file_stem()),
                expected: n,
                found: encoder.nrows(),
            });
        }
        check("enc_bias", n, enc_bias.len())?;
        check("dec_bias", d, dec_bias.len())?;
        if let Some(t) = &thresholds {
            check("thresholds", n, t.len())?;
        }
        if let Some(k) = activation.k() {
            if k == 0 {
                return Err(Error::invalid("top-k activation needs k >= 1"));
            }
        }
        Ok(Self {
            position,
            decoder,
            encoder,
            enc_bias,
            dec_bias,
            thresholds,
            activation,
            folded: false,
            normalized: OnceLock::new(),
        })
    }

    pub fn position(&self) -> SitePosition {
        self.position
    }

    pub fn with_position(mut self, position: SitePosition) -> Self {
        self.position = position;
        self
    }

    /// Model dimension `d`.
    pub fn dim(&self) -> usize {
        self.decoder.nrows()
    }

    /// Dictionary size `D`.
    pub fn n_features(&self) -> usize {
        self.decoder.ncols()
    }

    pub fn decoder(&self) -> &Array2<f32> {
        &self.decoder
    }

    pub fn encoder(&self) -> &Array2<f32> {
        &self.encoder
    }

    pub fn enc_bias(&self) -> &Array1<f32> {
        &self.enc_bias
    }

    pub fn dec_bias(&self) -> &Array1<f32> {
        &self.dec_bias
    }

    pub fn thresholds(&self) -> Option<&Array1<f32>> {
        self.thresholds.as_ref()
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub(crate) fn set_folded(&mut self, folded: bool) {
        self.folded = folded;
    }

    /// Replace the decoder, invalidating the cached normalized view.
    pub(crate) fn replace_decoder(&mut self, decoder: Array2<f32>) {
        debug_assert_eq!(decoder.dim(), self.decoder.dim());
        self.decoder = decoder;
        self.normalized = OnceLock::new();
    }

    /// Decoder column `i` as it is stored (not normalized).
    pub fn raw_column(&self, i: usize) -> Vec<f32> {
        self.decoder.column(i).to_vec()
    }

    /// Normalized view, computed once and cached.
    pub fn normalized(&self) -> &NormalizedColumns {
        self.normalized.get_or_init(|| {
            // built feature-major directly; same arithmetic as normalize_columns
            let (d, n) = self.decoder.dim();
            let mut rows = Array2::<f64>::zeros((n, d));
            let mut degenerate = vec![false; n];
            for (j, col) in self.decoder.axis_iter(Axis(1)).enumerate() {
                let mut row = rows.row_mut(j);
                row.iter_mut().zip(col).for_each(|(r, &c)| *r = f64::from(c));
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < DEGENERATE_NORM {
                    row.fill(0.0);
                    degenerate[j] = true;
                } else {
                    row.mapv_inplace(|x| x / norm);
                }
            }
            NormalizedColumns { rows, degenerate }
        })
    }

    pub fn degenerate_count(&self) -> usize {
        self.normalized().degenerate_count()
    }

    /// Unit-norm decoder column `i` (zero for a degenerate feature).
    pub fn unit_column(&self, i: usize) -> Vec<f64> {
        self.normalized().rows.row(i).to_vec()
    }
}

/// Everything known about one model: per-site dictionaries, optional toy
/// weights and free-form metadata.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub name: String,
    pub seed: Option<u64>,
    pub provenance: String,
    pub model_dim: usize,
    pub layer_count: usize,
    pub dictionaries: BTreeMap<SitePosition, FeatureDictionary>,
    pub model: Option<ToyTransformer>,
    /// Optional human annotations keyed by `layer/site/index`.
    pub annotations: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn new(name: impl Into<String>, model_dim: usize, layer_count: usize) -> Self {
        Self {
            name: name.into(),
            seed: None,
            provenance: String::new(),
            model_dim,
            layer_count,
            dictionaries: BTreeMap::new(),
            model: None,
            annotations: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, dict: FeatureDictionary) -> Result<()> {
        let pos = dict.position();
        if pos.layer >= self.layer_count {
            return Err(Error::OutOfRange {
                what: "layer",
                index: pos.layer,
                limit: self.layer_count,
            });
        }
        self.dictionaries.insert(pos, dict);
        Ok(())
    }

    pub fn get(&self, pos: SitePosition) -> Option<&FeatureDictionary> {
        self.dictionaries.get(&pos)
    }

    pub fn dictionary(&self, pos: SitePosition) -> Result<&FeatureDictionary> {
        self.get(pos).ok_or(Error::MissingDictionary(pos))
    }

    /// A dictionary whose `d` differs from the bundle's model dimension can be
    /// loaded and inspected but never matched.
    pub fn is_match_compatible(&self, pos: SitePosition) -> bool {
        self.get(pos).is_some_and(|d| d.dim() == self.model_dim)
    }

    pub fn incompatible_sites(&self) -> Vec<SitePosition> {
        self.dictionaries
            .iter()
            .filter(|(_, d)| d.dim() != self.model_dim)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn degenerate_count(&self) -> usize {
        self.dictionaries.values().map(|d| d.degenerate_count()).sum()
    }

    pub fn model(&self) -> Result<&ToyTransformer> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("bundle `{}` carries no model weights", self.name)))
    }

    pub fn annotation(&self, feature: &FeatureId) -> Option<&str> {
        self.annotations.get(&feature.to_string()).map(String::as_str)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryFiles {
    pub decoder: String,
    pub encoder: String,
    pub enc_bias: String,
    pub dec_bias: String,
    #[serde(default)]
    pub thresholds: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictionaryEntry {
    pub position: SitePosition,
    pub d: usize,
    #[serde(rename = "D")]
    pub n_features: usize,
    pub activation_kind: String,
    pub k: Option<usize>,
    #[serde(default)]
    pub folded: bool,
    pub files: DictionaryFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub config: ToyConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub provenance: String,
    pub model_dim: usize,
    pub layer_count: usize,
    pub dictionaries: Vec<DictionaryEntry>,
    #[serde(default)]
    pub model: Option<ModelEntry>,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn manifest(&self) -> Manifest {
        let dictionaries = self
            .dictionaries
            .values()
            .map(|dict| {
                let stem = dict.position().file_stem();
                DictionaryEntry {
                    position: dict.position(),
                    d: dict.dim(),
                    n_features: dict.n_features(),
                    activation_kind: dict.activation().name().to_string(),
                    k: dict.activation().k(),
                    folded: dict.is_folded(),
                    files: DictionaryFiles {
                        decoder: format!("{stem}_decoder.f32"),
                        encoder: format!("{stem}_encoder.f32"),
                        enc_bias: format!("{stem}_enc_bias.f32"),
                        dec_bias: format!("{stem}_dec_bias.f32"),
                        thresholds: dict.thresholds().map(|_| format!("{stem}_thresholds.f32")),
                    },
                }
            })
            .collect();
        let model = self.model.as_ref().map(|m| ModelEntry {
            config: m.config().clone(),
            tensors: m
                .named_tensors()
                .into_iter()
                .map(|(name, shape, _)| TensorEntry {
                    file: format!("model_{name}.f32"),
                    name,
                    shape,
                })
                .collect(),
        });
        Manifest {
            format_version: FORMAT_VERSION,
            name: self.name.clone(),
            seed: self.seed,
            provenance: self.provenance.clone(),
            model_dim: self.model_dim,
            layer_count: self.layer_count,
            dictionaries,
            model,
            annotations: self.annotations.clone(),
        }
    }

    /// Write the bundle directory (manifest plus raw tensors).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = self.manifest();
        for entry in &manifest.dictionaries {
            let dict = &self.dictionaries[&entry.position];
            write_f32(&dir.join(&entry.files.decoder), dict.decoder().iter().copied())?;
            write_f32(&dir.join(&entry.files.encoder), dict.encoder().iter().copied())?;
            write_f32(&dir.join(&entry.files.enc_bias), dict.enc_bias().iter().copied())?;
            write_f32(&dir.join(&entry.files.dec_bias), dict.dec_bias().iter().copied())?;
            if let (Some(file), Some(t)) = (&entry.files.thresholds, dict.thresholds()) {
                write_f32(&dir.join(file), t.iter().copied())?;
            }
        }
        if let (Some(entry), Some(model)) = (&manifest.model, &self.model) {
            for ((_, _, data), t) in model.named_tensors().into_iter().zip(&entry.tensors) {
                write_f32(&dir.join(&t.file), data.into_iter())?;
            }
        }
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

/// Load and validate a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<ModelBundle> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Manifest(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.layer_count == 0 || manifest.model_dim == 0 {
        return Err(Error::Manifest("layer_count and model_dim must be >= 1".into()));
    }

    let mut bundle = ModelBundle::new(manifest.name.clone(), manifest.model_dim, manifest.layer_count);
    bundle.seed = manifest.seed;
    bundle.provenance = manifest.provenance.clone();
    bundle.annotations = manifest.annotations.clone();

    for entry in &manifest.dictionaries {
        let (d, n) = (entry.d, entry.n_features);
        let decoder = read_matrix(dir, &entry.files.decoder, d, n)?;
        let encoder = read_matrix(dir, &entry.files.encoder, n, d)?;
        let enc_bias = Array1::from(read_f32(dir, &entry.files.enc_bias, n)?);
        let dec_bias = Array1::from(read_f32(dir, &entry.files.dec_bias, d)?);
        let thresholds = match &entry.files.thresholds {
            Some(f) => Some(Array1::from(read_f32(dir, f, n)?)),
            None => None,
        };
        let kind = ActivationKind::from_parts(&entry.activation_kind, entry.k)?;
        let mut dict = FeatureDictionary::new(
            entry.position,
            decoder,
            encoder,
            enc_bias,
            dec_bias,
            thresholds,
            kind,
        )?;
        dict.set_folded(entry.folded);
        bundle.insert(dict)?;
    }

    if let Some(model) = &manifest.model {
        let mut tensors = Vec::with_capacity(model.tensors.len());
        for t in &model.tensors {
            let len = t.shape.iter().product();
            tensors.push((t.name.clone(), t.shape.clone(), read_f32(dir, &t.file, len)?));
        }
        bundle.model = Some(ToyTransformer::from_named_tensors(model.config.clone(), tensors)?);
    }
    Ok(bundle)
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn tensor_name(file: &str) -> String {
    file.strip_suffix(".f32").unwrap_or(file).to_string()
}

fn read_matrix(dir: &Path, file: &str, rows: usize, cols: usize) -> Result<Array2<f32>> {
    let data = read_f32(dir, file, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked by read_f32"))
}

/// Read exactly `expected` little-endian `f32` values, rejecting non-finite data.
pub fn read_f32(dir: &Path, file: &str, expected: usize) -> Result<Vec<f32>> {
    let path: PathBuf = dir.join(file);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != expected {
        return Err(Error::ShapeMismatch {
            tensor: tensor_name(file),
            expected,
            found: bytes.len() / 4,
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: tensor_name(file),
            index,
        });
    }
    Ok(values)
}

pub fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}
