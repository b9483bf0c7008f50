//! Little-endian binary containers for traces (`PTRC`), per-cycle powers
//! (`PCYC`) and power templates (`PTPL`).

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::accel::CyclePowers;
use crate::chain::RawTrace;
use crate::template::PowerTemplate;
use crate::{Error, Result, Scalar};

pub const TRACE_MAGIC: &[u8; 4] = b"PTRC";
pub const POWERS_MAGIC: &[u8; 4] = b"PCYC";
pub const TEMPLATE_MAGIC: &[u8; 4] = b"PTPL";
pub const TRACE_VERSION: u16 = 1;
pub const TEMPLATE_VERSION: u16 = 1;

fn truncated(what: &str) -> impl Fn(std::io::Error) -> Error + '_ {
    move |_| Error::Format(format!("truncated {what}"))
}

fn expect_magic(r: &mut Cursor<&[u8]>, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(truncated("header"))?;
    if &m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_end(r: &Cursor<&[u8]>) -> Result<()> {
    let extra = r.get_ref().len() as u64 - r.position();
    if extra != 0 {
        return Err(Error::Format(format!("{extra} trailing bytes")));
    }
    Ok(())
}

fn read_f32s<F: Scalar>(r: &mut Cursor<&[u8]>, n: u64, what: &str) -> Result<Vec<F>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if remaining < n.saturating_mul(4) {
        return Err(Error::Format(format!(
            "{what}: header announces {n} values, only {} present",
            remaining / 4
        )));
    }
    (0..n)
        .map(|_| {
            r.read_f32::<LE>()
                .map(|v| F::of(v as f64))
                .map_err(truncated(what))
        })
        .collect()
}

pub fn encode_trace<F: Scalar>(t: &RawTrace<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(34 + 4 * t.len());
    out.extend_from_slice(TRACE_MAGIC);
    out.write_u16::<LE>(TRACE_VERSION).unwrap();
    out.write_f64::<LE>(t.sample_interval * 1e9).unwrap();
    out.write_u32::<LE>(t.samples_per_cycle as u32).unwrap();
    out.write_u64::<LE>(t.cycles as u64).unwrap();
    out.write_u64::<LE>(t.len() as u64).unwrap();
    for v in &t.samples {
        out.write_f32::<LE>(v.as_f64() as f32).unwrap();
    }
    out
}

pub fn decode_trace<F: Scalar>(bytes: &[u8]) -> Result<RawTrace<F>> {
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, TRACE_MAGIC)?;
    let version = r.read_u16::<LE>().map_err(truncated("header"))?;
    if version != TRACE_VERSION {
        return Err(Error::Unsupported(format!("trace version {version}")));
    }
    let interval_ns = r.read_f64::<LE>().map_err(truncated("header"))?;
    let spc = r.read_u32::<LE>().map_err(truncated("header"))? as usize;
    let cycles = r.read_u64::<LE>().map_err(truncated("header"))? as usize;
    let n = r.read_u64::<LE>().map_err(truncated("header"))?;
    if !(interval_ns > 0.0) || spc == 0 {
        return Err(Error::Format("non-positive sampling parameters".into()));
    }
    let samples = read_f32s(&mut r, n, "trace")?;
    expect_end(&r)?;
    Ok(RawTrace {
        samples,
        sample_interval: interval_ns * 1e-9,
        cycles,
        samples_per_cycle: spc,
    })
}

pub fn encode_powers<F: Scalar>(p: &CyclePowers<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * p.len());
    out.extend_from_slice(POWERS_MAGIC);
    out.write_u64::<LE>(p.len() as u64).unwrap();
    for v in &p.values {
        out.write_f32::<LE>(v.as_f64() as f32).unwrap();
    }
    out
}

pub fn decode_powers<F: Scalar>(bytes: &[u8]) -> Result<CyclePowers<F>> {
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, POWERS_MAGIC)?;
    let n = r.read_u64::<LE>().map_err(truncated("header"))?;
    let values = read_f32s(&mut r, n, "powers")?;
    expect_end(&r)?;
    Ok(CyclePowers { values, kernel: 0 })
}

pub fn encode_template<F: Scalar>(t: &PowerTemplate<F>) -> Vec<u8> {
    let plen = t.patch_len();
    let kc = t.kernel_count;
    let mut out = Vec::with_capacity(16 + 16 * kc + t.len() * (plen + 4 * kc));
    out.extend_from_slice(TEMPLATE_MAGIC);
    out.write_u16::<LE>(TEMPLATE_VERSION).unwrap();
    out.write_u8(t.kernel_size as u8).unwrap();
    out.write_u8(kc as u8).unwrap();
    out.write_u64::<LE>(t.len() as u64).unwrap();
    for k in 0..kc {
        out.write_f64::<LE>(t.mean[k]).unwrap();
        out.write_f64::<LE>(t.std[k]).unwrap();
    }
    for i in 0..t.len() {
        out.extend_from_slice(t.patch(i));
        for v in t.features(i) {
            out.write_f32::<LE>(v.as_f64() as f32).unwrap();
        }
    }
    out
}

pub fn decode_template<F: Scalar>(bytes: &[u8]) -> Result<PowerTemplate<F>> {
    let mut r = Cursor::new(bytes);
    expect_magic(&mut r, TEMPLATE_MAGIC)?;
    let version = r.read_u16::<LE>().map_err(truncated("header"))?;
    if version != TEMPLATE_VERSION {
        return Err(Error::Unsupported(format!("template version {version}")));
    }
    let k = r.read_u8().map_err(truncated("header"))? as usize;
    let kc = r.read_u8().map_err(truncated("header"))? as usize;
    let n = r.read_u64::<LE>().map_err(truncated("header"))? as usize;
    if !matches!(k, 3 | 5) || kc == 0 {
        return Err(Error::Format(format!(
            "kernel size {k} / kernel count {kc} invalid"
        )));
    }
    let mut mean = Vec::with_capacity(kc);
    let mut std = Vec::with_capacity(kc);
    for _ in 0..kc {
        mean.push(r.read_f64::<LE>().map_err(truncated("header"))?);
        std.push(r.read_f64::<LE>().map_err(truncated("header"))?);
    }
    let plen = k * (k + 1);
    let need = n.saturating_mul(plen + 4 * kc) as u64;
    if (bytes.len() as u64 - r.position()) < need {
        return Err(Error::Format(format!("template announces {n} entries, data truncated")));
    }
    let mut patches = vec![0u8; n * plen];
    let mut features = Vec::with_capacity(n * kc);
    for i in 0..n {
        r.read_exact(&mut patches[i * plen..(i + 1) * plen])
            .map_err(truncated("template"))?;
        features.extend(read_f32s::<F>(&mut r, kc as u64, "template")?);
    }
    expect_end(&r)?;
    PowerTemplate::from_parts(k, kc, patches, features, mean, std)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_trace<F: Scalar>(t: &RawTrace<F>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_trace(t))
}

pub fn read_trace<F: Scalar>(path: impl AsRef<Path>) -> Result<RawTrace<F>> {
    let path = path.as_ref();
    decode_trace(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_powers<F: Scalar>(p: &CyclePowers<F>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_powers(p))
}

pub fn read_powers<F: Scalar>(path: impl AsRef<Path>) -> Result<CyclePowers<F>> {
    let path = path.as_ref();
    decode_powers(&read_file(path)?).map_err(|e| e.in_file(path))
}

pub fn write_template<F: Scalar>(t: &PowerTemplate<F>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_template(t))
}

pub fn read_template<F: Scalar>(path: impl AsRef<Path>) -> Result<PowerTemplate<F>> {
    let path = path.as_ref();
    decode_template(&read_file(path)?).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_round_trip() {
        let t = RawTrace {
            samples: vec![0.5f64, -1.25, 3.0],
            sample_interval: 0.4e-9,
            cycles: 1,
            samples_per_cycle: 3,
        };
        let back: RawTrace<f64> = decode_trace(&encode_trace(&t)).unwrap();
        assert_eq!(back.samples, t.samples);
        assert_eq!(back.cycles, 1);
        assert!((back.sample_interval - t.sample_interval).abs() < 1e-20);
    }

    #[test]
    fn powers_round_trip_and_errors() {
        let p = CyclePowers {
            values: vec![1.0f32, 2.5],
            kernel: 0,
        };
        let bytes = encode_powers(&p);
        assert_eq!(&bytes[..4], b"PCYC");
        assert_eq!(decode_powers::<f32>(&bytes).unwrap().values, p.values);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_powers::<f32>(&bad), Err(Error::Format(_))));
        assert!(matches!(
            decode_powers::<f32>(&bytes[..bytes.len() - 2]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn file_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ptrc");
        std::fs::write(&path, b"NOPE").unwrap();
        let err = read_trace::<f64>(&path).unwrap_err().to_string();
        assert!(err.contains("x.ptrc"), "{err}");
    }
}
