//! File formats at the engine boundary.
//!
//! * NPY v1.0 tensors (`<f4` and `|u1` only, C order) for features, priors,
//!   prototypes and ground truth.
//! * A JSON scene manifest describing the tile layout and class vocabulary.
//! * Binary PGM (P5) masks holding class indices.
//!
//! The NPY writer reproduces the header layout numpy itself emits (including
//! the spare space numpy reserves for growing the first axis), so files saved
//! by `numpy.save` round-trip byte for byte.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";
const NPY_ALIGN: usize = 64;
/// numpy leaves room for the first dimension to grow to this many digits.
const NPY_GROWTH_DIGITS: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    Float32,
    Uint8,
}

impl DType {
    fn descr(self) -> &'static str {
        match self {
            DType::Float32 => "<f4",
            DType::Uint8 => "|u1",
        }
    }

    fn from_descr(descr: &str) -> Result<Self> {
        match descr {
            "<f4" => Ok(DType::Float32),
            "|u1" | "<u1" => Ok(DType::Uint8),
            other => Err(Error::Unsupported(format!(
                "dtype '{other}' (only '<f4' and '|u1' are accepted)"
            ))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float32(Vec<f32>),
    Uint8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Float32(v) => v.len(),
            TensorData::Uint8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A dense row-major tensor as stored in an NPY file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(TensorFile { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::Float32(data))
    }

    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, TensorData::Uint8(data))
    }

    /// Build a float32 tensor from a 2-D f64 array (values are rounded to f32).
    pub fn from_matrix(m: &ndarray::Array2<f64>) -> Self {
        let data = m.iter().map(|&v| v as f32).collect();
        TensorFile {
            shape: m.shape().to_vec(),
            data: TensorData::Float32(data),
        }
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::Float32(_) => DType::Float32,
            TensorData::Uint8(_) => DType::Uint8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    /// Interpret a 2-D float32 tensor as an f64 matrix.
    pub fn to_matrix(&self) -> Result<ndarray::Array2<f64>> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        };
        let TensorData::Float32(v) = &self.data else {
            return Err(Error::Unsupported("expected float32 data".into()));
        };
        let values = v.iter().map(|&x| x as f64).collect();
        Ok(ndarray::Array2::from_shape_vec((rows, cols), values).expect("shape checked"))
    }

    /// Interpret a 2-D uint8 tensor as a label image.
    pub fn to_label_image(&self) -> Result<ndarray::Array2<u8>> {
        let [rows, cols] = self.shape[..] else {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            )));
        };
        let TensorData::Uint8(v) = &self.data else {
            return Err(Error::Unsupported("expected uint8 data".into()));
        };
        Ok(ndarray::Array2::from_shape_vec((rows, cols), v.clone()).expect("shape checked"))
    }
}

/// Parsed NPY header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

fn format_header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let shape_repr = match shape {
        [] => "()".to_string(),
        [n] => format!("({n},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_repr
    );
    if let Some(first) = shape.first() {
        let digits = first.to_string().len();
        dict.push_str(&" ".repeat(NPY_GROWTH_DIGITS.saturating_sub(digits)));
    }
    // magic + version + u16 length + dict + trailing newline
    let unpadded = NPY_MAGIC.len() + 2 + 2 + dict.len() + 1;
    let pad = (NPY_ALIGN - unpadded % NPY_ALIGN) % NPY_ALIGN;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

/// Encode a tensor as NPY v1.0 bytes.
pub fn encode_npy(t: &TensorFile) -> Vec<u8> {
    let mut out = format_header(t.dtype(), &t.shape);
    match &t.data {
        TensorData::Float32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::Uint8(v) => out.extend_from_slice(v),
    }
    out
}

fn read_header_from<R: Read>(r: &mut R) -> Result<NpyHeader> {
    let mut preamble = [0u8; 10];
    r.read_exact(&mut preamble)
        .map_err(|_| Error::Format("file too short for an NPY preamble".into()))?;
    if &preamble[..6] != NPY_MAGIC {
        return Err(Error::Format("bad NPY magic".into()));
    }
    if preamble[6..8] != [1, 0] {
        return Err(Error::Unsupported(format!(
            "NPY version {}.{} (only 1.0)",
            preamble[6], preamble[7]
        )));
    }
    let len = u16::from_le_bytes([preamble[8], preamble[9]]) as usize;
    let mut raw = vec![0u8; len];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated NPY header".into()))?;
    let text =
        std::str::from_utf8(&raw).map_err(|_| Error::Format("NPY header is not ASCII".into()))?;
    let dict = header::parse_dict(text)?;

    let descr = dict
        .descr
        .ok_or_else(|| Error::Format("NPY header lacks 'descr'".into()))?;
    let fortran = dict
        .fortran_order
        .ok_or_else(|| Error::Format("NPY header lacks 'fortran_order'".into()))?;
    let shape = dict
        .shape
        .ok_or_else(|| Error::Format("NPY header lacks 'shape'".into()))?;
    if fortran {
        return Err(Error::Unsupported("Fortran-ordered NPY data".into()));
    }
    Ok(NpyHeader {
        dtype: DType::from_descr(&descr)?,
        shape,
    })
}

/// Decode NPY v1.0 bytes.
pub fn decode_npy(bytes: &[u8]) -> Result<TensorFile> {
    let mut cursor = bytes;
    let header = read_header_from(&mut cursor)?;
    let count: usize = header.shape.iter().product();
    let need = count * header.dtype.width();
    if cursor.len() != need {
        return Err(Error::Format(format!(
            "NPY payload has {} bytes, shape {:?} needs {need}",
            cursor.len(),
            header.shape
        )));
    }
    let data = match header.dtype {
        DType::Float32 => TensorData::Float32(
            cursor
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::Uint8 => TensorData::Uint8(cursor.to_vec()),
    };
    TensorFile::new(header.shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes).map_err(|e| annotate(e, path))
}

/// Read only the header of an NPY file.
pub fn read_tensor_header(path: impl AsRef<Path>) -> Result<NpyHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(&mut BufReader::new(file)).map_err(|e| annotate(e, path))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_npy(t)).map_err(|e| Error::io(path, e))
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Unsupported(m) => Error::Unsupported(format!("{}: {m}", path.display())),
        Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
        other => other,
    }
}

mod header {
    //! Minimal parser for the Python dict literal inside an NPY header.

    use crate::error::{Error, Result};

    #[derive(Default)]
    pub(super) struct Dict {
        pub descr: Option<String>,
        pub fortran_order: Option<bool>,
        pub shape: Option<Vec<usize>>,
    }

    enum Value {
        Str(String),
        Bool(bool),
        Tuple(Vec<usize>),
    }

    struct Parser<'a> {
        s: &'a [u8],
        pos: usize,
    }

    impl<'a> Parser<'a> {
        fn err(&self, what: &str) -> Error {
            Error::Format(format!("NPY header: {what} at byte {}", self.pos))
        }

        fn skip_ws(&mut self) {
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
        }

        fn peek(&mut self) -> Option<u8> {
            self.skip_ws();
            self.s.get(self.pos).copied()
        }

        fn expect(&mut self, c: u8) -> Result<()> {
            if self.peek() == Some(c) {
                self.pos += 1;
                Ok(())
            } else {
                Err(self.err(&format!("expected '{}'", c as char)))
            }
        }

        fn string(&mut self) -> Result<String> {
            let quote = self.peek().ok_or_else(|| self.err("unexpected end"))?;
            if quote != b'\'' && quote != b'"' {
                return Err(self.err("expected string"));
            }
            self.pos += 1;
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos] != quote {
                self.pos += 1;
            }
            if self.pos == self.s.len() {
                return Err(self.err("unterminated string"));
            }
            let out = String::from_utf8_lossy(&self.s[start..self.pos]).into_owned();
            self.pos += 1;
            Ok(out)
        }

        fn integer(&mut self) -> Result<usize> {
            self.skip_ws();
            let start = self.pos;
            while self.pos < self.s.len() && self.s[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            // numpy < 2 could write Python 2 longs such as `3L`
            let digits = std::str::from_utf8(&self.s[start..self.pos]).unwrap();
            if self.s.get(self.pos) == Some(&b'L') {
                self.pos += 1;
            }
            digits.parse().map_err(|_| self.err("expected integer"))
        }

        fn value(&mut self) -> Result<Value> {
            match self.peek() {
                Some(b'\'') | Some(b'"') => Ok(Value::Str(self.string()?)),
                Some(b'(') => {
                    self.pos += 1;
                    let mut dims = Vec::new();
                    loop {
                        match self.peek() {
                            Some(b')') => {
                                self.pos += 1;
                                break;
                            }
                            Some(c) if c.is_ascii_digit() => {
                                dims.push(self.integer()?);
                                match self.peek() {
                                    Some(b',') => self.pos += 1,
                                    Some(b')') => {}
                                    _ => return Err(self.err("bad tuple")),
                                }
                            }
                            _ => return Err(self.err("bad tuple")),
                        }
                    }
                    Ok(Value::Tuple(dims))
                }
                Some(b'T') if self.s[self.pos..].starts_with(b"True") => {
                    self.pos += 4;
                    Ok(Value::Bool(true))
                }
                Some(b'F') if self.s[self.pos..].starts_with(b"False") => {
                    self.pos += 5;
                    Ok(Value::Bool(false))
                }
                _ => Err(self.err("unsupported value")),
            }
        }
    }

    pub(super) fn parse_dict(text: &str) -> Result<Dict> {
        let mut p = Parser {
            s: text.as_bytes(),
            pos: 0,
        };
        let mut dict = Dict::default();
        p.expect(b'{')?;
        loop {
            if p.peek() == Some(b'}') {
                p.pos += 1;
                break;
            }
            let key = p.string()?;
            p.expect(b':')?;
            let value = p.value()?;
            match (key.as_str(), value) {
                ("descr", Value::Str(s)) => dict.descr = Some(s),
                ("fortran_order", Value::Bool(b)) => dict.fortran_order = Some(b),
                ("shape", Value::Tuple(t)) => dict.shape = Some(t),
                (k, _) => return Err(p.err(&format!("unexpected key or value type for '{k}'"))),
            }
            match p.peek() {
                Some(b',') => p.pos += 1,
                Some(b'}') => {}
                _ => return Err(p.err("expected ',' or '}'")),
            }
        }
        if p.peek().is_some() {
            return Err(p.err("trailing characters"));
        }
        Ok(dict)
    }
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridDims {
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePx {
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub id: String,
    pub features_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priors_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_path: Option<PathBuf>,
    /// Semantic-branch patch tokens, used with `prototypes_path` when no
    /// precomputed priors are supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vlm_features_path: Option<PathBuf>,
}

/// Scene description. Relative paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileManifest {
    pub scene_id: String,
    pub classes: Vec<ClassEntry>,
    pub patch_grid: PatchGridDims,
    pub patch_px: usize,
    pub tile_px: TilePx,
    pub tiles: Vec<TileEntry>,
    /// Text prototypes, `C' x d`; each class owns `1 + synonyms.len()`
    /// consecutive rows in class-list order (name first, then synonyms).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes_path: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
    /// Context feature dimension, filled in by validation when features are
    /// checked.
    #[serde(skip)]
    pub feature_dim: Option<usize>,
}

impl TileManifest {
    pub fn patches_per_tile(&self) -> usize {
        self.patch_grid.rows * self.patch_grid.cols
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Prototype row count each class owns.
    pub fn prototype_owners(&self) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(k, c)| std::iter::repeat_n(k, 1 + c.synonyms.len()))
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ManifestChecks {
    /// Open every context feature tensor header and check its shape.
    pub features: bool,
}

impl Default for ManifestChecks {
    fn default() -> Self {
        ManifestChecks { features: true }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<TileManifest> {
    load_manifest_with(path, ManifestChecks::default())
}

pub fn load_manifest_with(path: impl AsRef<Path>, checks: ManifestChecks) -> Result<TileManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: TileManifest = serde_json::from_str(&text).map_err(|e| {
        Error::manifest(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    validate_manifest(&mut manifest, checks)?;
    Ok(manifest)
}

pub fn validate_manifest(m: &mut TileManifest, checks: ManifestChecks) -> Result<()> {
    if m.classes.is_empty() {
        return Err(Error::manifest("classes", "class list is empty"));
    }
    let mut seen = HashSet::new();
    for (i, c) in m.classes.iter().enumerate() {
        if c.name.is_empty() {
            return Err(Error::manifest(format!("classes[{i}].name"), "empty name"));
        }
        if !seen.insert(c.name.as_str()) {
            return Err(Error::manifest(
                format!("classes[{i}].name"),
                format!("duplicate class name '{}'", c.name),
            ));
        }
    }
    if m.classes.len() > 256 {
        return Err(Error::manifest(
            "classes",
            "at most 256 classes fit an 8-bit mask",
        ));
    }
    if m.patch_grid.rows == 0 || m.patch_grid.cols == 0 {
        return Err(Error::manifest("patch_grid", "rows and cols must be positive"));
    }
    if m.patch_px == 0 {
        return Err(Error::manifest("patch_px", "must be positive"));
    }
    if m.patch_grid.rows * m.patch_px != m.tile_px.h {
        return Err(Error::Shape(format!(
            "patch_grid.rows ({}) x patch_px ({}) != tile_px.h ({})",
            m.patch_grid.rows, m.patch_px, m.tile_px.h
        )));
    }
    if m.patch_grid.cols * m.patch_px != m.tile_px.w {
        return Err(Error::Shape(format!(
            "patch_grid.cols ({}) x patch_px ({}) != tile_px.w ({})",
            m.patch_grid.cols, m.patch_px, m.tile_px.w
        )));
    }
    if m.tiles.is_empty() {
        return Err(Error::manifest("tiles", "tile list is empty"));
    }

    let n = m.patches_per_tile();
    let c = m.num_classes();
    let mut ids = HashSet::new();
    let mut feature_dim = None;
    let mut vlm_dim = None;
    for (i, tile) in m.tiles.iter().enumerate() {
        if tile.id.is_empty() {
            return Err(Error::manifest(format!("tiles[{i}].id"), "empty id"));
        }
        if tile.id.contains(['/', '\\']) || tile.id == "." || tile.id == ".." {
            return Err(Error::manifest(
                format!("tiles[{i}].id"),
                "tile ids name output files and cannot contain path separators",
            ));
        }
        if !ids.insert(tile.id.as_str()) {
            return Err(Error::manifest(
                format!("tiles[{i}].id"),
                format!("duplicate tile id '{}'", tile.id),
            ));
        }
        if checks.features {
            let field = format!("tiles[{i}].features_path");
            let d = check_matrix(m, &tile.features_path, &field, n, None, DType::Float32)?;
            match feature_dim {
                None => feature_dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Shape(format!(
                        "{field}: feature dimension {d} differs from earlier tiles ({prev})"
                    )))
                }
                _ => {}
            }
        }
        if let Some(p) = &tile.priors_path {
            check_matrix(
                m,
                p,
                &format!("tiles[{i}].priors_path"),
                n,
                Some(c),
                DType::Float32,
            )?;
        } else if tile.vlm_features_path.is_none() || m.prototypes_path.is_none() {
            return Err(Error::manifest(
                format!("tiles[{i}].priors_path"),
                "tile has no priors and no vlm_features_path + prototypes_path to compute them",
            ));
        }
        if let Some(p) = &tile.vlm_features_path {
            let field = format!("tiles[{i}].vlm_features_path");
            let d = check_matrix(m, p, &field, n, None, DType::Float32)?;
            match vlm_dim {
                None => vlm_dim = Some(d),
                Some(prev) if prev != d => {
                    return Err(Error::Shape(format!(
                        "{field}: dimension {d} differs from earlier tiles ({prev})"
                    )))
                }
                _ => {}
            }
        }
        if let Some(p) = &tile.gt_path {
            let field = format!("tiles[{i}].gt_path");
            let full = m.resolve(p);
            let h = read_tensor_header(&full).map_err(|e| wrap_missing(e, &field))?;
            if h.dtype != DType::Uint8 || h.shape != [m.tile_px.h, m.tile_px.w] {
                return Err(Error::Shape(format!(
                    "{field}: expected uint8 tensor of shape [{}, {}], got {:?} {:?}",
                    m.tile_px.h, m.tile_px.w, h.dtype, h.shape
                )));
            }
        }
    }
    if let Some(p) = &m.prototypes_path {
        let owners = m.prototype_owners().len();
        let full = m.resolve(p);
        let h = read_tensor_header(&full).map_err(|e| wrap_missing(e, "prototypes_path"))?;
        if h.dtype != DType::Float32 || h.shape.len() != 2 || h.shape[0] != owners {
            return Err(Error::Shape(format!(
                "prototypes_path: expected float32 [{owners}, d] (one row per class name or synonym), got {:?} {:?}",
                h.dtype, h.shape
            )));
        }
        if let Some(d) = vlm_dim {
            if h.shape[1] != d {
                return Err(Error::Shape(format!(
                    "prototypes_path: dimension {} does not match vlm features ({d})",
                    h.shape[1]
                )));
            }
        }
    }
    m.feature_dim = feature_dim;
    Ok(())
}

fn wrap_missing(e: Error, field: &str) -> Error {
    match e {
        Error::Io { path, source } => Error::manifest(
            field,
            format!("cannot open {}: {source}", path.display()),
        ),
        other => other,
    }
}

fn check_matrix(
    m: &TileManifest,
    rel: &Path,
    field: &str,
    rows: usize,
    cols: Option<usize>,
    dtype: DType,
) -> Result<usize> {
    let full = m.resolve(rel);
    let h = read_tensor_header(&full).map_err(|e| wrap_missing(e, field))?;
    if h.dtype != dtype {
        return Err(Error::Shape(format!(
            "{field}: expected {dtype:?}, got {:?}",
            h.dtype
        )));
    }
    let ok = h.shape.len() == 2 && h.shape[0] == rows && cols.is_none_or(|c| h.shape[1] == c);
    if !ok {
        let want = match cols {
            Some(c) => format!("[{rows}, {c}]"),
            None => format!("[{rows}, d]"),
        };
        return Err(Error::Shape(format!(
            "{field}: expected shape {want}, got {:?}",
            h.shape
        )));
    }
    Ok(h.shape[1])
}

// ---------------------------------------------------------------------------
// Masks

fn pgm_header(rows: usize, cols: usize) -> String {
    format!("P5\n{cols} {rows}\n255\n")
}

pub fn encode_mask(mask: &ndarray::Array2<u8>) -> Vec<u8> {
    let (rows, cols) = mask.dim();
    let mut out = pgm_header(rows, cols).into_bytes();
    out.reserve(rows * cols);
    out.extend(mask.iter().copied());
    out
}

pub fn write_mask(path: impl AsRef<Path>, mask: &ndarray::Array2<u8>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_mask(mask))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parse a binary PGM with maxval < 256. Comments are allowed in the header.
pub fn decode_mask(bytes: &[u8]) -> Result<ndarray::Array2<u8>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("not a binary PGM (magic {})", fields[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM {what} '{s}'")))
    };
    let cols = parse(&fields[1], "width")?;
    let rows = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Unsupported(format!("PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != rows * cols {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {}",
            raster.len(),
            rows * cols
        )));
    }
    Ok(ndarray::Array2::from_shape_vec((rows, cols), raster.to_vec()).expect("size checked"))
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ndarray::Array2<u8>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mask(&bytes).map_err(|e| annotate(e, path))
}
