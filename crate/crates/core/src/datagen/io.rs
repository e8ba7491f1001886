//! Dataset files.
//!
//! CSV layout: `#`-prefixed `key=value` metadata lines, a header
//! `m,i,y,x0,...,x{d-1}`, then one row per `(m, i)`. Floats use Rust's
//! shortest round-trip formatting, so reading back is bit-exact.
//!
//! Binary layout (little endian): magic `IPSD`, `u16` version, `u64` M, N, d,
//! `f64` noise sd, `u64` seed, `u64` stream, `u32` id length plus UTF-8 id,
//! then `M·N` responses and `M·N·d` token coordinates as `f64`.

use std::io::{BufRead, Read, Write};

use super::{DataError, Dataset, Provenance, TokenBatch};

const MAGIC: &[u8; 4] = b"IPSD";
const VERSION: u16 = 1;

pub fn write_csv<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DataError> {
    let (m, n, d) = (ds.samples(), ds.tokens_per_sample(), ds.dim());
    writeln!(w, "# format=ipsattn-dataset-v1")?;
    writeln!(w, "# samples={m}")?;
    writeln!(w, "# tokens={n}")?;
    writeln!(w, "# dim={d}")?;
    writeln!(w, "# noise_sd={}", ds.noise_sd)?;
    writeln!(w, "# seed={}", ds.provenance.seed)?;
    writeln!(w, "# stream={}", ds.provenance.stream)?;
    writeln!(w, "# truth_id={}", ds.provenance.truth_id)?;
    write!(w, "m,i,y")?;
    for k in 0..d {
        write!(w, ",x{k}")?;
    }
    writeln!(w)?;
    let mut line = String::new();
    for s in 0..m {
        for i in 0..n {
            use std::fmt::Write as _;
            line.clear();
            let _ = write!(line, "{s},{i},{}", ds.responses[s * n + i]);
            for x in ds.tokens.token(s, i) {
                let _ = write!(line, ",{x}");
            }
            writeln!(w, "{line}")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<Dataset, DataError> {
    let mut meta = std::collections::HashMap::new();
    let mut lines = r.lines();
    let header = loop {
        let line = lines.next().ok_or_else(|| DataError::Format("missing header".into()))??;
        match line.strip_prefix('#') {
            Some(rest) => {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
            None => break line,
        }
    };
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[..3] != ["m", "i", "y"] {
        return Err(DataError::Format(format!("unexpected header {header:?}")));
    }
    let d = cols.len() - 3;
    let mut rows: Vec<(usize, usize, f64, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 3 {
            return Err(DataError::Format(format!("row {} has {} fields, expected {}", lineno + 1, f.len(), d + 3)));
        }
        let m = parse_int(f[0])?;
        let i = parse_int(f[1])?;
        let y = parse_float(f[2])?;
        let x = f[3..].iter().map(|s| parse_float(s)).collect::<Result<Vec<_>, _>>()?;
        rows.push((m, i, y, x));
    }
    if rows.is_empty() {
        return Err(DataError::Format("no data rows".into()));
    }
    let samples = rows.iter().map(|r| r.0).max().unwrap_or(0) + 1;
    let n = rows.iter().map(|r| r.1).max().unwrap_or(0) + 1;
    if rows.len() != samples * n {
        return Err(DataError::Format(format!("{} rows for {samples} samples of {n} tokens", rows.len())));
    }
    let mut responses = vec![f64::NAN; samples * n];
    let mut data = vec![0.0; samples * n * d];
    let mut seen = vec![false; samples * n];
    for (m, i, y, x) in rows {
        let idx = m * n + i;
        if seen[idx] {
            return Err(DataError::Format(format!("duplicate row m={m}, i={i}")));
        }
        seen[idx] = true;
        responses[idx] = y;
        data[idx * d..(idx + 1) * d].copy_from_slice(&x);
    }
    for (key, value) in [("samples", samples), ("tokens", n), ("dim", d)] {
        if let Some(v) = meta.get(key) {
            if parse_int(v)? != value {
                return Err(DataError::Format(format!("metadata {key}={v} disagrees with data ({value})")));
            }
        }
    }
    let noise_sd = meta.get("noise_sd").map(|s| parse_float(s)).transpose()?.unwrap_or(0.0);
    let provenance = Provenance {
        seed: meta.get("seed").map(|s| parse_u64(s)).transpose()?.unwrap_or(0),
        stream: meta.get("stream").map(|s| parse_u64(s)).transpose()?.unwrap_or(0),
        truth_id: meta.get("truth_id").cloned().unwrap_or_default(),
    };
    Dataset::new(TokenBatch::new(samples, n, d, data)?, responses, noise_sd, provenance)
}

fn parse_int(s: &str) -> Result<usize, DataError> {
    s.trim().parse().map_err(|_| DataError::Format(format!("bad integer {s:?}")))
}

fn parse_u64(s: &str) -> Result<u64, DataError> {
    s.trim().parse().map_err(|_| DataError::Format(format!("bad integer {s:?}")))
}

fn parse_float(s: &str) -> Result<f64, DataError> {
    s.trim().parse().map_err(|_| DataError::Format(format!("bad number {s:?}")))
}

pub fn write_binary<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DataError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [ds.samples(), ds.tokens_per_sample(), ds.dim()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&ds.noise_sd.to_le_bytes())?;
    w.write_all(&ds.provenance.seed.to_le_bytes())?;
    w.write_all(&ds.provenance.stream.to_le_bytes())?;
    let id = ds.provenance.truth_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes())?;
    w.write_all(id)?;
    for v in ds.responses.iter().chain(ds.tokens.data()) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Dataset, DataError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let samples = read_u64(&mut r)? as usize;
    let n = read_u64(&mut r)? as usize;
    let d = read_u64(&mut r)? as usize;
    let noise_sd = f64::from_bits(read_u64(&mut r)?);
    let seed = read_u64(&mut r)?;
    let stream = read_u64(&mut r)?;
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let mut id = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut id)?;
    let truth_id = String::from_utf8(id).map_err(|_| DataError::Format("id is not UTF-8".into()))?;
    let count = samples
        .checked_mul(n)
        .and_then(|mn| mn.checked_mul(d + 1))
        .ok_or_else(|| DataError::Format("header sizes overflow".into()))?;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_bits(read_u64(&mut r)?));
    }
    let data = values.split_off(samples * n);
    let tokens = TokenBatch::new(samples, n, d, data)?;
    Dataset::new(tokens, values, noise_sd, Provenance { seed, stream, truth_id })
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
