//! Field containers and CSV output.
//!
//! Binary layout (little endian): magic `SHLBFLD1`, 32-byte SHA-256 of the
//! canonical grid-spec JSON, dtype code `u32` (1 = f64), component count
//! `u32`, node count `u64`, then the components one after another, each in
//! grid order (row-major on rectangles, pole then rings on disks).

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::domain::{Domain, DomainSpec};
use crate::error::{Error, Result};
use crate::fields::{ScalarField, VectorField};

const MAGIC: &[u8; 8] = b"SHLBFLD1";
const DTYPE_F64: u32 = 1;

/// SHA-256 of the canonical (sorted-key) JSON of a grid spec.
pub fn spec_hash(spec: &DomainSpec) -> [u8; 32] {
    let v = serde_json::to_value(spec).expect("grid specs serialize");
    Sha256::digest(serde_json::to_vec(&v).expect("values serialize")).into()
}

/// SHA-256 (hex) of the canonical serialization of a JSON value; object
/// keys are sorted, so key order in the source text does not matter.
pub fn canonical_hash(v: &serde_json::Value) -> String {
    hex(&Sha256::digest(serde_json::to_vec(v).expect("values serialize")))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Raw container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldData {
    pub spec_hash: [u8; 32],
    pub components: Vec<Vec<f64>>,
}

pub fn encode(domain: &Domain, components: &[&[f64]]) -> Result<Vec<u8>> {
    let n = domain.len();
    if components.is_empty() || components.iter().any(|c| c.len() != n) {
        return Err(Error::GridMismatch);
    }
    let mut out = Vec::with_capacity(56 + 8 * n * components.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&spec_hash(&domain.spec));
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    out.extend_from_slice(&(components.len() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for c in components {
        for v in *c {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<FieldData> {
    let bad = |m: &str| Error::Config(format!("field container: {m}"));
    if bytes.len() < 56 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let spec_hash: [u8; 32] = bytes[8..40].try_into().unwrap();
    let dtype = u32::from_le_bytes(bytes[40..44].try_into().unwrap());
    if dtype != DTYPE_F64 {
        return Err(bad("unsupported dtype"));
    }
    let comps = u32::from_le_bytes(bytes[44..48].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[48..56].try_into().unwrap()) as usize;
    if bytes.len() != 56 + 8 * n * comps {
        return Err(bad("length does not match the header"));
    }
    let mut it = bytes[56..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let components = (0..comps).map(|_| it.by_ref().take(n).collect()).collect();
    Ok(FieldData { spec_hash, components })
}

pub fn write_scalar(path: &Path, domain: &Domain, u: &ScalarField) -> Result<()> {
    if u.grid != domain.id {
        return Err(Error::GridMismatch);
    }
    write_bytes(path, &encode(domain, &[&u.values])?)
}

pub fn write_vector(path: &Path, domain: &Domain, f: &VectorField) -> Result<()> {
    if f.grid != domain.id {
        return Err(Error::GridMismatch);
    }
    write_bytes(path, &encode(domain, &[&f.x, &f.y])?)
}

/// Reads a one-component container written for `domain`.
pub fn read_scalar(path: &Path, domain: &Domain) -> Result<ScalarField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let data = decode(&bytes)?;
    if data.spec_hash != spec_hash(&domain.spec) {
        return Err(Error::GridMismatch);
    }
    match data.components.as_slice() {
        [c] if c.len() == domain.len() => Ok(ScalarField::new(domain, c.clone())),
        _ => Err(Error::Config("field container: expected one component".into())),
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// `{:.16e}`: 17 significant digits with a '.' decimal point.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with columns `x,y` and one column per component.
pub fn field_csv(domain: &Domain, names: &[&str], components: &[&[f64]]) -> String {
    let mut s = String::from("x,y");
    for n in names {
        s.push(',');
        s.push_str(n);
    }
    s.push('\n');
    for k in 0..domain.len() {
        s.push_str(&num(domain.x[k]));
        s.push(',');
        s.push_str(&num(domain.y[k]));
        for c in components {
            s.push(',');
            s.push_str(&num(c[k]));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::build_domain;

    #[test]
    fn roundtrip_and_grid_check() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 2.0], n: [17, 33] }).unwrap();
        let u = d.scalar_fn(|x, y| x - 3.0 * y);
        let dir = std::env::temp_dir().join(format!("sharplab-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("u.bin");
        write_scalar(&p, &d, &u).unwrap();
        let back = read_scalar(&p, &d).unwrap();
        assert_eq!(back.values, u.values);
        let other = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 2.0], n: [17, 32] }).unwrap();
        assert!(matches!(read_scalar(&p, &other), Err(Error::GridMismatch)));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [16, 16] }).unwrap();
        let u = ScalarField::zeros(&d);
        let mut b = encode(&d, &[&u.values]).unwrap();
        assert!(decode(&b[..50]).is_err());
        b.pop();
        assert!(decode(&b).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    #[test]
    fn number_format() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(-2.0), "-2.0000000000000000e0");
    }
}
