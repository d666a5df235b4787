//! File formats: PFM depth, binary PPM color, feature CSV, and the
//! line-oriented `key=value` record files used for manifests and configs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthKind, DepthMap};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Cursor over a netpbm-style header: whitespace-separated ASCII tokens.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderReader { bytes, pos: 0 }
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(start, format!("{what} is not ASCII")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let start = {
            self.skip_space();
            self.pos
        };
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::format(start, format!("invalid {what} {tok:?}")))
    }

    /// Consumes the single whitespace byte that terminates a header.
    fn end_of_header(&mut self) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(self.pos, "header not terminated by whitespace")),
        }
    }
}

/// Decodes a grayscale PFM (`Pf`) buffer.
pub fn decode_depth_pfm(bytes: &[u8], kind: DepthKind) -> Result<DepthMap> {
    let mut h = HeaderReader::new(bytes);
    let magic = h.token("magic")?;
    match magic {
        "Pf" => {}
        "PF" => {
            return Err(Error::UnsupportedFormat(
                "PF (3-channel PFM); depth maps must be single-channel Pf".into(),
            ))
        }
        other => return Err(Error::format(0, format!("not a PFM file (magic {other:?})"))),
    }
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let scale: f32 = h.number("scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(h.pos, format!("invalid scale {scale}")));
    }
    let data_start = h.end_of_header()?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(0, "image dimensions overflow"))?;
    let actual = bytes.len() - data_start;
    if actual != expected {
        return Err(Error::format(
            data_start,
            format!("expected {expected} payload bytes, found {actual}"),
        ));
    }
    let little = scale < 0.0;
    let payload = &bytes[data_start..];
    let mut values = vec![0.0f64; width * height];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // PFM rows run bottom to top
        let (row_from_bottom, col) = (i / width, i % width);
        values[(height - 1 - row_from_bottom) * width + col] = v as f64;
    }
    DepthMap::new(width, height, values, kind)
        .map_err(|e| Error::format(data_start, format!("invalid depth payload: {e}")))
}

/// Encodes a depth map as little-endian grayscale PFM.
pub fn encode_depth_pfm(map: &DepthMap) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for row in (0..h).rev() {
        for col in 0..w {
            out.extend_from_slice(&(map.get(col, row) as f32).to_le_bytes());
        }
    }
    out
}

pub fn read_depth_pfm(path: impl AsRef<Path>, kind: DepthKind) -> Result<DepthMap> {
    decode_depth_pfm(&read_bytes(path.as_ref())?, kind)
}

pub fn write_depth_pfm(map: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_depth_pfm(map))
}

/// Decodes a binary (`P6`) PPM with maxval 255.
pub fn decode_color_ppm(bytes: &[u8]) -> Result<ColorImage> {
    let mut h = HeaderReader::new(bytes);
    let magic = h.token("magic")?;
    match magic {
        "P6" => {}
        "P3" => {
            return Err(Error::UnsupportedFormat(
                "P3 (ASCII PPM); only binary P6 is supported".into(),
            ))
        }
        other => return Err(Error::format(0, format!("not a P6 PPM file (magic {other:?})"))),
    }
    let width: usize = h.number("width")?;
    let height: usize = h.number("height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PPM maxval {maxval}; only 255 is supported"
        )));
    }
    let data_start = h.end_of_header()?;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(0, "image dimensions overflow"))?;
    let actual = bytes.len() - data_start;
    if actual != expected {
        return Err(Error::format(
            data_start,
            format!("expected {expected} payload bytes, found {actual}"),
        ));
    }
    let pixels = bytes[data_start..]
        .chunks_exact(3)
        .map(|c| [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0])
        .collect();
    ColorImage::new(width, height, pixels)
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_color_ppm(image: &ColorImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.reserve(image.pixels().len() * 3);
    for p in image.pixels() {
        out.extend_from_slice(&[quantize(p[0]), quantize(p[1]), quantize(p[2])]);
    }
    out
}

pub fn read_color_ppm(path: impl AsRef<Path>) -> Result<ColorImage> {
    decode_color_ppm(&read_bytes(path.as_ref())?)
}

pub fn write_color_ppm(image: &ColorImage, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_color_ppm(image))
}

/// Row-major table of 32-bit feature values with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    labels: Vec<String>,
    values: Vec<f32>,
}

impl FeatureTable {
    pub fn new(labels: Vec<String>, values: Vec<f32>) -> Result<Self> {
        let d = labels.len();
        if d == 0 && !values.is_empty() {
            return Err(Error::invalid(
                "feature table with values needs at least one column",
            ));
        }
        if d > 0 && !values.len().is_multiple_of(d) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of width {d}",
                values.len()
            )));
        }
        Ok(FeatureTable { labels, values })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn cols(&self) -> usize {
        self.labels.len()
    }

    pub fn rows(&self) -> usize {
        if self.labels.is_empty() {
            0
        } else {
            self.values.len() / self.labels.len()
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.cols();
        &self.values[i * d..(i + 1) * d]
    }
}

/// Formats with 9 significant digits in plain decimal notation.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn encode_feature_csv(table: &FeatureTable) -> String {
    let mut out = table.labels.join(",");
    out.push('\n');
    for r in 0..table.rows() {
        for (c, v) in table.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format_sig9(*v as f64));
        }
        out.push('\n');
    }
    out
}

pub fn write_feature_csv(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), encode_feature_csv(table).as_bytes())
}

pub fn decode_feature_csv(text: &str) -> Result<FeatureTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let labels: Vec<String> = header.split(',').map(str::to_owned).collect();
    let mut values = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != labels.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected {} fields, found {}", labels.len(), fields.len()),
            });
        }
        for f in fields {
            values.push(f.trim().parse::<f32>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("invalid number {f:?}"),
            })?);
        }
    }
    FeatureTable::new(labels, values)
}

pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_feature_csv(&text)
}

/// One `key=value` pair with the line it came from (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Splits text into records separated by blank lines. Lines starting with
/// `#` are comments.
pub fn parse_records(text: &str) -> Result<Vec<Vec<KeyValue>>> {
    let mut records = Vec::new();
    let mut current: Vec<KeyValue> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            if !current.is_empty() {
                records.push(std::mem::take(&mut current));
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            message: format!("expected key=value, found {line:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        if current.iter().any(|kv| kv.key == key) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("duplicate key {key:?}"),
            });
        }
        current.push(KeyValue {
            key: key.to_owned(),
            value: value.trim().to_owned(),
            line: i + 1,
        });
    }
    if !current.is_empty() {
        records.push(current);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub depth_path: PathBuf,
    pub color_path: Option<PathBuf>,
    pub width: usize,
    pub height: usize,
    pub depth_kind: DepthKind,
}

/// Scene list. Relative paths are resolved against the manifest's directory
/// when read from disk.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for rec in parse_records(text)? {
            let first_line = rec[0].line;
            let get = |k: &str| rec.iter().find(|kv| kv.key == k);
            let require = |k: &str| {
                get(k).ok_or_else(|| Error::Parse {
                    line: first_line,
                    message: format!("record is missing {k}"),
                })
            };
            let parse_usize = |kv: &KeyValue| {
                kv.value.parse::<usize>().map_err(|_| Error::Parse {
                    line: kv.line,
                    message: format!("invalid {} {:?}", kv.key, kv.value),
                })
            };
            for kv in &rec {
                if !matches!(
                    kv.key.as_str(),
                    "depth_path" | "color_path" | "width" | "height" | "depth_kind"
                ) {
                    log::warn!("manifest line {}: ignoring unknown key {:?}", kv.line, kv.key);
                }
            }
            let kind_kv = require("depth_kind")?;
            let depth_kind = kind_kv.value.parse().map_err(|e: Error| Error::Parse {
                line: kind_kv.line,
                message: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                depth_path: base.join(&require("depth_path")?.value),
                color_path: get("color_path").map(|kv| base.join(&kv.value)),
                width: parse_usize(require("width")?)?,
                height: parse_usize(require("height")?)?,
                depth_kind,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(&e.depth_path) {
                return Err(Error::invalid(format!(
                    "manifest lists {} twice",
                    e.depth_path.display()
                )));
            }
        }
        Ok(Manifest { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    /// Serializes with paths made relative to `base` where possible.
    pub fn encode(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "depth_path={}", rel(&e.depth_path));
            if let Some(c) = &e.color_path {
                let _ = writeln!(out, "color_path={}", rel(c));
            }
            let _ = writeln!(out, "width={}", e.width);
            let _ = writeln!(out, "height={}", e.height);
            let _ = writeln!(out, "depth_kind={}", e.depth_kind.as_str());
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        write_bytes(path, self.encode(base).as_bytes())
    }
}

/// Loads an entry's depth and optional color, checking declared sizes.
pub fn load_entry(entry: &ManifestEntry) -> Result<(DepthMap, Option<ColorImage>)> {
    let depth = read_depth_pfm(&entry.depth_path, entry.depth_kind)?;
    if depth.width() != entry.width || depth.height() != entry.height {
        return Err(Error::invalid(format!(
            "{} is {}x{}, manifest says {}x{}",
            entry.depth_path.display(),
            depth.width(),
            depth.height(),
            entry.width,
            entry.height
        )));
    }
    let color = match &entry.color_path {
        Some(p) => {
            let img = read_color_ppm(p)?;
            if img.width() != entry.width || img.height() != entry.height {
                return Err(Error::invalid(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    p.display(),
                    img.width(),
                    img.height(),
                    entry.width,
                    entry.height
                )));
            }
            Some(img)
        }
        None => None,
    };
    Ok((depth, color))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn depth_4x3() -> DepthMap {
        let vals = (0..12)
            .map(|i| i as f64 * 0.37 + 0.01)
            .map(|v| v as f32 as f64)
            .collect();
        DepthMap::new(4, 3, vals, DepthKind::Metric).unwrap()
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let d = depth_4x3();
        let back = decode_depth_pfm(&encode_depth_pfm(&d), DepthKind::Metric).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn pfm_header_layout() {
        let bytes = encode_depth_pfm(&depth_4x3());
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 48);
        // first stored row is the bottom image row
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first as f64, depth_4x3().get(0, 2));
    }

    #[test]
    fn pfm_big_endian_is_read() {
        let mut bytes = b"Pf\n2 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_be_bytes());
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        let d = decode_depth_pfm(&bytes, DepthKind::Inverse).unwrap();
        assert_eq!(d.values(), &[1.5, 2.5]);
    }

    #[test]
    fn pfm_color_header_rejected() {
        let mut bytes = b"PF\n1 1\n-1.0\n".to_vec();
        bytes.extend_from_slice(&[0u8; 12]);
        let err = decode_depth_pfm(&bytes, DepthKind::Metric).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)), "{err}");
    }

    #[test]
    fn pfm_truncated_payload_names_counts() {
        let mut bytes = encode_depth_pfm(&depth_4x3());
        bytes.truncate(bytes.len() - 5);
        let err = decode_depth_pfm(&bytes, DepthKind::Metric).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert_eq!(offset, 12);
                assert!(message.contains("48") && message.contains("43"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pfm_garbage_never_panics() {
        for bytes in [
            &b""[..],
            b"Pf",
            b"Pf\n-3 2\n-1\n",
            b"Pf\n2 2\nabc\n",
            b"Pf\n1 1\n0\n\0\0\0\0",
        ] {
            assert!(decode_depth_pfm(bytes, DepthKind::Metric).is_err());
        }
    }

    #[test]
    fn ppm_solid_red_normalizes() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        for _ in 0..4 {
            bytes.extend_from_slice(&[255, 0, 0]);
        }
        let img = decode_color_ppm(&bytes).unwrap();
        assert!(img.pixels().iter().all(|p| *p == [1.0, 0.0, 0.0]));
    }

    #[test]
    fn ppm_rejects_ascii_and_deep() {
        let err = decode_color_ppm(b"P3\n1 1\n255\n255 0 0\n").unwrap_err();
        assert!(err.to_string().contains("P3"), "{err}");
        let err = decode_color_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat(_)));
    }

    #[test]
    fn ppm_with_comment_in_header() {
        let bytes = b"P6\n# made by hand\n1 1\n255\n\x80\x40\x20";
        let img = decode_color_ppm(bytes).unwrap();
        assert_eq!(img.get(0, 0), [128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip_exact(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 56) as u8 };
            let pixels: Vec<[f32; 3]> = (0..w * h)
                .map(|_| [next() as f32 / 255.0, next() as f32 / 255.0, next() as f32 / 255.0])
                .collect();
            let img = ColorImage::new(w, h, pixels).unwrap();
            let bytes = encode_color_ppm(&img);
            prop_assert_eq!(decode_color_ppm(&bytes).unwrap(), img.clone());
            prop_assert_eq!(encode_color_ppm(&decode_color_ppm(&bytes).unwrap()), bytes);
        }

        #[test]
        fn pfm_round_trip_any_values(vals in proptest::collection::vec(0.0f32..1e6, 1..40)) {
            let n = vals.len();
            let d = DepthMap::new(n, 1, vals.iter().map(|&v| v as f64).collect(), DepthKind::Inverse).unwrap();
            let back = decode_depth_pfm(&encode_depth_pfm(&d), DepthKind::Inverse).unwrap();
            prop_assert_eq!(back, d);
        }
    }

    #[test]
    fn feature_csv_shapes() {
        let t = FeatureTable::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.5, -3.25, 0.1, 1e-7, 123456.79],
        )
        .unwrap();
        let text = encode_feature_csv(&t);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "a,b,c");
        assert!(text.ends_with('\n'));
        let back = decode_feature_csv(&text).unwrap();
        for (x, y) in t.values().iter().zip(back.values()) {
            assert!(((x - y) / x).abs() <= 1e-6, "{x} vs {y}");
        }

        let empty = FeatureTable::new(vec!["x".into()], vec![]).unwrap();
        assert_eq!(encode_feature_csv(&empty), "x\n");
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.1234567891234), "0.123456789");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-2.5e-7), "-0.00000025");
    }

    #[test]
    fn records_and_manifest() {
        let text = "depth_path=a.pfm\ncolor_path=a.ppm\nwidth=4\nheight=3\ndepth_kind=metric\n\n# second\ndepth_path=b.pfm\nwidth=4\nheight=3\ndepth_kind=inverse\n";
        let m = Manifest::parse(text, Path::new("/data")).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].color_path.as_deref(), Some(Path::new("/data/a.ppm")));
        assert_eq!(m.entries[1].depth_kind, DepthKind::Inverse);
        assert_eq!(
            Manifest::parse(&m.encode(Path::new("/data")), Path::new("/data")).unwrap(),
            m
        );
    }

    #[test]
    fn manifest_errors_carry_lines() {
        let err = Manifest::parse(
            "depth_path=a\nwidth=x\nheight=3\ndepth_kind=metric\n",
            Path::new("."),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_records("a=1\nnot a pair\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let dup = "depth_path=a\nwidth=1\nheight=1\ndepth_kind=metric\n\ndepth_path=a\nwidth=1\nheight=1\ndepth_kind=metric\n";
        assert!(Manifest::parse(dup, Path::new(".")).is_err());
    }
}
