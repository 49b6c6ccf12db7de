//! Volume file I/O.
//!
//! Two formats are supported, selected by file extension:
//!
//! * NIfTI-1 single file (`.nii`, or gzipped `.nii.gz`). Volumes are written
//!   as FLOAT32 with an identity qform carrying the origin; the intensity
//!   domain is recorded in the `descrip` field. NIfTI's `i` axis is our width
//!   axis, so the on-disk voxel order matches the in-memory order exactly.
//!   Reading accepts the common integer and float datatypes and applies
//!   `scl_slope`/`scl_inter`.
//! * Raw (`.raw`): a little-endian float32 payload next to a JSON sidecar
//!   (`<stem>.json`) holding `{dims, spacing, origin, domain}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Domain, Volume};

const NIFTI_HEADER_SIZE: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const DOMAIN_TAG: &str = "domain=";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Nifti { gz: bool },
    Raw,
}

fn format_of(path: &Path) -> Result<Format> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if name.ends_with(".nii.gz") {
        Ok(Format::Nifti { gz: true })
    } else if name.ends_with(".nii") {
        Ok(Format::Nifti { gz: false })
    } else if name.ends_with(".raw") {
        Ok(Format::Raw)
    } else {
        Err(Error::Format(format!(
            "unsupported volume file extension: {}",
            path.display()
        )))
    }
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti { .. } => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let bytes = if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
                let mut out = Vec::new();
                GzDecoder::new(&bytes[..])
                    .read_to_end(&mut out)
                    .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
                out
            } else {
                bytes
            };
            decode_nifti(&bytes).map_err(|e| match e {
                Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
                other => other,
            })
        }
        Format::Raw => load_raw(path),
    }
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match format_of(path)? {
        Format::Nifti { gz } => {
            let bytes = encode_nifti(v);
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            if gz {
                let mut enc = GzEncoder::new(w, Compression::fast());
                enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
                w = enc.finish().map_err(|e| Error::io(path, e))?;
            } else {
                w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
        Format::Raw => save_raw(v, path),
    }
}

fn encode_nifti(v: &Volume) -> Vec<u8> {
    let [nd, nh, nw] = v.dims();
    let sp = v.spacing();
    let org = v.origin();
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, x: i16| h[off..off + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, x: f32| h[off..off + 4].copy_from_slice(&x.to_le_bytes());

    h[0..4].copy_from_slice(&(NIFTI_HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r'; // regular
    let dim = [3i16, nw as i16, nh as i16, nd as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    let pixdim = [1.0f32, sp[2] as f32, sp[1] as f32, sp[0] as f32, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: mm
    let descrip = format!("{DOMAIN_TAG}{}", v.domain().as_str());
    h[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());
    put_i16(&mut h, 252, 1); // qform_code: scanner
    put_i16(&mut h, 254, 0); // sform_code
    // identity quaternion (b, c, d all zero), origin in (x, y, z) = (w, h, d)
    put_f32(&mut h, 268, org[2] as f32);
    put_f32(&mut h, 272, org[1] as f32);
    put_f32(&mut h, 276, org[0] as f32);
    h[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352: empty extension flag

    h.reserve(v.len() * 4);
    for &x in v.data() {
        h.extend_from_slice(&x.to_le_bytes());
    }
    h
}

fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too small for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == NIFTI_HEADER_SIZE as i32;
    if !le && i32::from_be_bytes(bytes[0..4].try_into().unwrap()) != NIFTI_HEADER_SIZE as i32 {
        return Err(Error::Format("not a NIfTI-1 file (sizeof_hdr != 348)".into()));
    }
    let i16_at = |off: usize| {
        let b: [u8; 2] = bytes[off..off + 2].try_into().unwrap();
        if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }
    };
    let f32_at = |off: usize| {
        let b: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
        if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::Format("missing NIfTI-1 magic".into()));
    }
    if magic == b"ni1\0" {
        return Err(Error::Format("two-file NIfTI (.hdr/.img) is not supported".into()));
    }
    let ndim = i16_at(40);
    let dim: Vec<i64> = (1..8).map(|i| i16_at(40 + 2 * i) as i64).collect();
    let spatial = match ndim {
        3 => [dim[0], dim[1], dim[2]],
        4..=7 if dim[3..ndim as usize].iter().all(|&d| d == 1) => [dim[0], dim[1], dim[2]],
        _ => {
            return Err(Error::Format(format!(
                "expected a 3D volume, header has {ndim} dimensions {:?}",
                &dim[..ndim.clamp(0, 7) as usize]
            )))
        }
    };
    if spatial.iter().any(|&d| d < 1) {
        return Err(Error::Format(format!("invalid dims {spatial:?}")));
    }
    let (nw, nh, nd) = (spatial[0] as usize, spatial[1] as usize, spatial[2] as usize);
    let n = nw * nh * nd;
    let datatype = i16_at(70);
    let offset = (f32_at(108).max(NIFTI_HEADER_SIZE as f32)) as usize;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Format(format!("unsupported NIfTI datatype {other}"))),
    };
    let payload = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| Error::Format(format!("truncated payload: need {} bytes", n * width)))?;
    let slope = f32_at(112);
    let inter = f32_at(116);
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() {
        (1.0f64, 0.0f64)
    } else {
        (slope as f64, inter as f64)
    };
    let raw: Vec<f64> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT8 => payload.iter().map(|&b| b as i8 as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le { i16::from_le_bytes(b) } else { i16::from_be_bytes(b) }) as f64
            })
            .collect(),
        DT_UINT16 => payload
            .chunks_exact(2)
            .map(|c| {
                let b = [c[0], c[1]];
                (if le { u16::from_le_bytes(b) } else { u16::from_be_bytes(b) }) as f64
            })
            .collect(),
        DT_INT32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().unwrap();
                (if le { i32::from_le_bytes(b) } else { i32::from_be_bytes(b) }) as f64
            })
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().unwrap();
                (if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }) as f64
            })
            .collect(),
        DT_FLOAT64 => payload
            .chunks_exact(8)
            .map(|c| {
                let b = c.try_into().unwrap();
                if le { f64::from_le_bytes(b) } else { f64::from_be_bytes(b) }
            })
            .collect(),
        _ => unreachable!(),
    };
    let identity_scale = slope == 1.0 && inter == 0.0;
    let data: Vec<f32> = if identity_scale && datatype == DT_FLOAT32 {
        // keep float32 payloads bit-exact
        payload
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().unwrap();
                if le { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) }
            })
            .collect()
    } else {
        raw.iter().map(|&x| (x * slope + inter) as f32).collect()
    };

    let pix = |i: usize| {
        let p = f32_at(76 + 4 * i).abs() as f64;
        if p > 0.0 && p.is_finite() { p } else { 1.0 }
    };
    let spacing = [pix(3), pix(2), pix(1)];
    let origin = if i16_at(252) > 0 {
        [f32_at(276) as f64, f32_at(272) as f64, f32_at(268) as f64]
    } else {
        [0.0; 3]
    };
    let descrip_raw = &bytes[148..228];
    let descrip_end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(descrip_raw.len());
    let descrip = String::from_utf8_lossy(&descrip_raw[..descrip_end]);
    let domain = descrip
        .split(';')
        .find_map(|part| part.trim().strip_prefix(DOMAIN_TAG).and_then(Domain::parse))
        .unwrap_or(Domain::Hu);
    Volume::new([nd, nh, nw], spacing, origin, domain, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    domain: Domain,
}

/// Sidecar path for a raw payload: `foo.raw` → `foo.json`.
pub fn raw_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn load_raw(path: &Path) -> Result<Volume> {
    let side_path = raw_sidecar_path(path);
    let side = File::open(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: RawSidecar = serde_json::from_reader(BufReader::new(side))
        .map_err(|e| Error::Format(format!("{}: {e}", side_path.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = side.dims.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for dims {:?}, found {}",
            path.display(),
            n * 4,
            side.dims,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(side.dims, side.spacing, side.origin, side.domain, data)
}

fn save_raw(v: &Volume, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = RawSidecar {
        dims: v.dims(),
        spacing: v.spacing(),
        origin: v.origin(),
        domain: v.domain(),
    };
    let side_path = raw_sidecar_path(path);
    let json = serde_json::to_vec_pretty(&side).expect("sidecar serializes");
    std::fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        Volume::from_fn([5, 6, 7], [0.8, 0.8, 0.8], Domain::Hu, |d, h, w| {
            (d as f32 * 100.0 - h as f32 * 3.25 + w as f32 * 0.125).sin() * 900.0
        })
        .unwrap()
        .with_origin([-12.5, 3.0, 40.25])
    }

    #[test]
    fn nifti_gz_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let p = dir.path().join("v.nii.gz");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.data(), v.data());
        assert_eq!(back.domain(), Domain::Hu);
        for i in 0..3 {
            assert!((back.spacing()[i] - 0.8).abs() < 1e-6);
            assert!((back.origin()[i] - v.origin()[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn plain_nifti_and_raw_round_trip_keep_domain() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::from_fn([4, 4, 8], [1.6, 0.5, 2.0], Domain::Normalized, |d, h, w| {
            ((d + h + w) % 5) as f32 / 4.0
        })
        .unwrap();
        for name in ["n.nii", "r.raw"] {
            let p = dir.path().join(name);
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data(), "{name}");
            assert_eq!(back.domain(), Domain::Normalized, "{name}");
            for i in 0..3 {
                assert!((back.spacing()[i] - v.spacing()[i]).abs() < 1e-6, "{name}");
            }
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_volume("/definitely/not/here.nii.gz").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn two_dimensional_nifti_is_format_error() {
        let mut bytes = encode_nifti(&Volume::filled([1, 4, 4], Domain::Hu, 1.0).unwrap());
        bytes[40..42].copy_from_slice(&2i16.to_le_bytes());
        bytes[46..48].copy_from_slice(&0i16.to_le_bytes());
        assert!(matches!(decode_nifti(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_and_garbage_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        std::fs::write(&p, b"not a nifti").unwrap();
        assert!(matches!(load_volume(&p), Err(Error::Format(_))));
        let mut bytes = encode_nifti(&sample());
        bytes.truncate(bytes.len() - 10);
        assert!(matches!(decode_nifti(&bytes), Err(Error::Format(_))));
        assert!(matches!(load_volume(dir.path().join("x.png")), Err(Error::Format(_))));
    }

    #[test]
    fn int16_payload_with_scaling() {
        let mut bytes = encode_nifti(&Volume::filled([1, 1, 2], Domain::Hu, 0.0).unwrap());
        bytes.truncate(NIFTI_VOX_OFFSET);
        bytes[70..72].copy_from_slice(&DT_INT16.to_le_bytes());
        bytes[72..74].copy_from_slice(&16i16.to_le_bytes());
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1024.0f32).to_le_bytes());
        bytes.extend_from_slice(&10i16.to_le_bytes());
        bytes.extend_from_slice(&(-3i16).to_le_bytes());
        let v = decode_nifti(&bytes).unwrap();
        assert_eq!(v.data(), &[-1004.0, -1030.0]);
    }

    #[cfg(unix)]
    #[test]
    fn unwritable_directory_is_io_error() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        std::fs::create_dir(&ro).unwrap();
        std::fs::set_permissions(&ro, std::fs::Permissions::from_mode(0o555)).unwrap();
        let target = ro.join("v.nii.gz");
        let res = save_volume(&sample(), &target);
        // root ignores directory permissions; only assert when the write was refused
        if std::fs::metadata(&target).is_err() {
            assert!(matches!(res, Err(Error::Io { .. })));
        }
        let missing_parent = dir.path().join("nope/v.nii.gz");
        assert!(matches!(save_volume(&sample(), missing_parent), Err(Error::Io { .. })));
    }
}
