//! Compression of attribute images and rate/distortion metrics.
//!
//! Two codecs are available: a bundled lossless baseline (deflate over raw
//! RGB rows) and an adapter that shells out to the BPG command-line tools
//! (`bpgenc`/`bpgdec`) for HEVC-intra lossy coding.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::Path;
use std::process::Command;

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::cloud::Rgb;
use crate::error::{Error, Result};
use crate::mapping::AttributeImage;

pub const BASELINE_MAGIC: [u8; 4] = *b"FPLB";
pub const BASELINE_HEADER_LEN: usize = 16;

/// Environment variables naming the external encoder and decoder binaries.
pub const BPGENC_ENV: &str = "FOLDPC_BPGENC";
pub const BPGDEC_ENV: &str = "FOLDPC_BPGDEC";

pub const MAX_QP: u8 = 51;

/// QPs of a default rate-distortion sweep.
pub const DEFAULT_QPS: [u8; 7] = [20, 25, 30, 35, 40, 45, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CodecChoice {
    LosslessBaseline,
    ExternalBpg { qp: u8 },
}

impl CodecChoice {
    pub fn id(&self) -> u8 {
        match self {
            CodecChoice::LosslessBaseline => 0,
            CodecChoice::ExternalBpg { .. } => 1,
        }
    }

    pub fn qp(&self) -> Option<u8> {
        match *self {
            CodecChoice::LosslessBaseline => None,
            CodecChoice::ExternalBpg { qp } => Some(qp),
        }
    }

    pub fn from_parts(id: u8, qp: u8) -> Result<Self> {
        let c = match id {
            0 => CodecChoice::LosslessBaseline,
            1 => CodecChoice::ExternalBpg { qp },
            other => return Err(Error::InvalidArgument(format!("unknown codec id {other}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        match self.qp() {
            Some(qp) if qp > MAX_QP => Err(Error::InvalidArgument(format!("QP {qp} outside [0, {MAX_QP}]"))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedImage {
    pub codec: CodecChoice,
    pub width: u32,
    pub height: u32,
    pub payload: Vec<u8>,
}

/// Locations of the external BPG tools.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalCodec {
    pub encoder: OsString,
    pub decoder: OsString,
}

impl Default for ExternalCodec {
    fn default() -> Self {
        ExternalCodec {
            encoder: "bpgenc".into(),
            decoder: "bpgdec".into(),
        }
    }
}

impl ExternalCodec {
    pub fn from_env() -> Self {
        let d = ExternalCodec::default();
        ExternalCodec {
            encoder: std::env::var_os(BPGENC_ENV).unwrap_or(d.encoder),
            decoder: std::env::var_os(BPGDEC_ENV).unwrap_or(d.decoder),
        }
    }

    /// Whether the encoder can be spawned at all.
    pub fn available(&self) -> bool {
        Command::new(&self.encoder).arg("-h").output().is_ok()
    }

    fn run(&self, bin: &OsString, args: &[&std::ffi::OsStr]) -> Result<()> {
        let name = bin.to_string_lossy().into_owned();
        let out = Command::new(bin).args(args).output().map_err(|e| Error::CodecMissing {
            binary: name.clone(),
            msg: e.to_string(),
        })?;
        if !out.status.success() {
            return Err(Error::CodecFailed {
                binary: name,
                status: out.status.to_string(),
                stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
            });
        }
        Ok(())
    }

    /// `bpgenc -q <qp> -f 444 -o out.bpg in.png`
    pub fn encode(&self, image: &AttributeImage, qp: u8) -> Result<Vec<u8>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("in.png");
        let output = dir.path().join("out.bpg");
        write_png(&input, image.width, image.height, &image.pixels)?;
        let qp = qp.to_string();
        self.run(
            &self.encoder,
            &["-q".as_ref(), qp.as_ref(), "-f".as_ref(), "444".as_ref(), "-o".as_ref(), output.as_os_str(), input.as_os_str()],
        )?;
        std::fs::read(&output).map_err(|e| Error::io(&output, e))
    }

    /// `bpgdec -o out.ppm in.bpg`
    pub fn decode(&self, payload: &[u8]) -> Result<(usize, usize, Vec<Rgb>)> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let input = dir.path().join("in.bpg");
        let output = dir.path().join("out.ppm");
        std::fs::write(&input, payload).map_err(|e| Error::io(&input, e))?;
        self.run(&self.decoder, &["-o".as_ref(), output.as_os_str(), input.as_os_str()])?;
        let bytes = std::fs::read(&output).map_err(|e| Error::io(&output, e))?;
        parse_ppm(&bytes)
    }
}

fn write_png(path: &Path, width: usize, height: usize, pixels: &[Rgb]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(pixels.as_flattened()).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Binary `P6` portable pixmap with maxval 255.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<Rgb>)> {
    let bad = |m: &str| Error::CorruptPayload(format!("PPM: {m}"));
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
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 pixmap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit pixmaps are supported"));
    }
    pos += 1;
    let data = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    Ok((w, h, data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

pub fn write_ppm(width: usize, height: usize, pixels: &[Rgb]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels.as_flattened());
    out
}

fn baseline_compress(image: &AttributeImage) -> Result<Vec<u8>> {
    let raw = image.pixels.as_flattened();
    let mut out = Vec::with_capacity(BASELINE_HEADER_LEN + raw.len() / 2);
    out.extend_from_slice(&BASELINE_MAGIC);
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(raw.len() as u32).to_le_bytes());
    let mut enc = DeflateEncoder::new(out, Compression::default());
    enc.write_all(raw).map_err(|e| Error::io("<deflate>", e))?;
    enc.finish().map_err(|e| Error::io("<deflate>", e))
}

fn baseline_decompress(payload: &[u8]) -> Result<(usize, usize, Vec<Rgb>)> {
    let corrupt = |m: &str| Error::CorruptPayload(m.to_string());
    if payload.len() < BASELINE_HEADER_LEN || payload[..4] != BASELINE_MAGIC {
        return Err(corrupt("missing baseline header"));
    }
    let word = |i: usize| u32::from_le_bytes(payload[i..i + 4].try_into().unwrap()) as usize;
    let (w, h, len) = (word(4), word(8), word(12));
    if w == 0 || h == 0 || w.checked_mul(h).and_then(|p| p.checked_mul(3)) != Some(len) {
        return Err(corrupt("inconsistent baseline dimensions"));
    }
    let mut raw = Vec::with_capacity(len);
    DeflateDecoder::new(&payload[BASELINE_HEADER_LEN..])
        .take(len as u64 + 1)
        .read_to_end(&mut raw)
        .map_err(|e| Error::CorruptPayload(format!("deflate stream: {e}")))?;
    if raw.len() != len {
        return Err(corrupt("deflate stream has the wrong length"));
    }
    Ok((w, h, raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

pub fn compress_with(image: &AttributeImage, choice: CodecChoice, external: &ExternalCodec) -> Result<CompressedImage> {
    choice.validate()?;
    let payload = match choice {
        CodecChoice::LosslessBaseline => baseline_compress(image)?,
        CodecChoice::ExternalBpg { qp } => external.encode(image, qp)?,
    };
    Ok(CompressedImage {
        codec: choice,
        width: image.width as u32,
        height: image.height as u32,
        payload,
    })
}

pub fn compress(image: &AttributeImage, choice: CodecChoice) -> Result<CompressedImage> {
    compress_with(image, choice, &ExternalCodec::from_env())
}

pub fn decompress_with(blob: &CompressedImage, external: &ExternalCodec) -> Result<AttributeImage> {
    let (w, h, pixels) = match blob.codec {
        CodecChoice::LosslessBaseline => baseline_decompress(&blob.payload)?,
        CodecChoice::ExternalBpg { .. } => external.decode(&blob.payload)?,
    };
    if w != blob.width as usize || h != blob.height as usize {
        return Err(Error::CorruptPayload(format!(
            "decoded {w}x{h} image, expected {}x{}",
            blob.width, blob.height
        )));
    }
    AttributeImage::from_pixels(w, h, pixels)
}

pub fn decompress(blob: &CompressedImage) -> Result<AttributeImage> {
    decompress_with(blob, &ExternalCodec::from_env())
}

/// BT.709 luma.
#[inline]
pub fn luma(c: &Rgb) -> f64 {
    0.2126 * c[0] as f64 + 0.7152 * c[1] as f64 + 0.0722 * c[2] as f64
}

/// PSNR of the luma channel with peak 255; identical inputs give +inf.
pub fn y_psnr(a: &[Rgb], b: &[Rgb]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "attribute sequences differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument("empty attribute sequences".into()));
    }
    let mse = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = luma(p) - luma(q);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

pub fn bits_per_point(bytes: usize, points: usize) -> Result<f64> {
    if points == 0 {
        return Err(Error::InvalidArgument("bits per point of an empty cloud".into()));
    }
    Ok(8.0 * bytes as f64 / points as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> AttributeImage {
        let px = (0..w * h).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        AttributeImage::from_pixels(w, h, px).unwrap()
    }

    #[test]
    fn baseline_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 32, 32);
        let blob = compress(&img, CodecChoice::LosslessBaseline).unwrap();
        assert_eq!(&blob.payload[..4], b"FPLB");
        let back = decompress(&blob).unwrap();
        assert_eq!(back.pixels, img.pixels);
        assert_eq!((back.width, back.height), (32, 32));
    }

    #[test]
    fn constant_image_compresses_better() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noisy = random_image(&mut rng, 32, 32);
        let flat = AttributeImage::from_pixels(32, 32, vec![[40, 90, 200]; 1024]).unwrap();
        let a = compress(&flat, CodecChoice::LosslessBaseline).unwrap();
        let b = compress(&noisy, CodecChoice::LosslessBaseline).unwrap();
        assert!(a.payload.len() < b.payload.len());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 16, 8);
        let mut blob = compress(&img, CodecChoice::LosslessBaseline).unwrap();
        blob.payload.truncate(blob.payload.len() - 10);
        assert!(decompress(&blob).is_err());
        blob.payload.truncate(10);
        assert!(decompress(&blob).is_err());
    }

    #[test]
    fn missing_external_binary_names_it() {
        let ext = ExternalCodec {
            encoder: "/nonexistent/bpgenc-missing".into(),
            decoder: "/nonexistent/bpgdec-missing".into(),
        };
        let img = AttributeImage::from_pixels(1, 1, vec![[1, 2, 3]]).unwrap();
        let err = compress_with(&img, CodecChoice::ExternalBpg { qp: 30 }, &ext).unwrap_err();
        assert!(matches!(&err, Error::CodecMissing { binary, .. } if binary.contains("bpgenc-missing")));
        assert!(!ext.available());
    }

    #[test]
    fn qp_validation() {
        assert!(CodecChoice::ExternalBpg { qp: 52 }.validate().is_err());
        assert!(CodecChoice::from_parts(1, 51).is_ok());
        assert!(CodecChoice::from_parts(7, 0).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = vec![[10, 20, 30], [200, 100, 50]];
        assert_eq!(y_psnr(&a, &a).unwrap(), f64::INFINITY);
        let b: Vec<Rgb> = a.iter().map(|c| c.map(|v| v + 1)).collect();
        let p = y_psnr(&a, &b).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((p - 48.1308).abs() < 1e-4);
        assert_eq!(y_psnr(&a, &b).unwrap(), y_psnr(&b, &a).unwrap());
        assert!(y_psnr(&a, &b[..1]).is_err());
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bits_per_point(1000, 8000).unwrap(), 1.0);
        assert_eq!(bits_per_point(1000, 16000).unwrap(), 0.5);
        assert!(bits_per_point(10, 0).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let px = vec![[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12], [13, 14, 15], [16, 17, 18]];
        let bytes = write_ppm(3, 2, &px);
        assert_eq!(parse_ppm(&bytes).unwrap(), (3, 2, px));
        assert!(parse_ppm(b"P6\n# c\n2 2\n255\n\x00").is_err());
    }
}
