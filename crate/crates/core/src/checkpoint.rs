//! Binary checkpoint files for parameter vectors.
//!
//! Layout (see `docs/formats.md`):
//!
//! ```text
//! ZOPRO1\n
//! dim <decimal>\n
//! iteration <decimal>\n
//! seed <decimal>\n
//! arch <descriptor>\n        (optional)
//! data\n
//! <dim little-endian f64 values>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamVector;

pub const MAGIC: &str = "ZOPRO1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub dim: usize,
    pub iteration: u64,
    pub seed: u64,
    /// Free-form architecture descriptor, interpreted by the model layer.
    pub arch: Option<String>,
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &CheckpointHeader, params: &ParamVector) -> Result<()> {
    if header.dim != params.dim() {
        return Err(Error::dim_mismatch(header.dim, params.dim()));
    }
    let mut text = format!(
        "{MAGIC}\ndim {}\niteration {}\nseed {}\n",
        header.dim, header.iteration, header.seed
    );
    if let Some(arch) = &header.arch {
        if arch.contains('\n') {
            return Err(Error::Checkpoint("architecture descriptor must be one line".into()));
        }
        text.push_str(&format!("arch {arch}\n"));
    }
    text.push_str("data\n");
    w.write_all(text.as_bytes())?;
    let mut buf = Vec::with_capacity(8 * params.dim());
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_line<R: BufRead>(r: &mut R) -> Result<String> {
    let mut line = String::new();
    let n = r.read_line(&mut line)?;
    if n == 0 {
        return Err(Error::Checkpoint("unexpected end of header".into()));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn field<T: std::str::FromStr>(line: &str, key: &str) -> Result<T> {
    let value = line
        .strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Checkpoint(format!("expected `{key} <value>`, found `{line}`")))?;
    value
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad value for {key}: `{value}`")))
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<(CheckpointHeader, ParamVector)> {
    let mut r = BufReader::new(r);
    let magic = read_line(&mut r)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic `{magic}`")));
    }
    let dim: usize = field(&read_line(&mut r)?, "dim")?;
    let iteration = field(&read_line(&mut r)?, "iteration")?;
    let seed = field(&read_line(&mut r)?, "seed")?;
    let mut arch = None;
    let mut line = read_line(&mut r)?;
    if let Some(desc) = line.strip_prefix("arch ") {
        arch = Some(desc.to_string());
        line = read_line(&mut r)?;
    }
    if line != "data" {
        return Err(Error::Checkpoint(format!("expected `data`, found `{line}`")));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * dim {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            8 * dim
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let params = ParamVector::new(values)?;
    Ok((
        CheckpointHeader {
            dim,
            iteration,
            seed,
            arch,
        },
        params,
    ))
}

pub fn save(path: &Path, header: &CheckpointHeader, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, header, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, ParamVector)> {
    let file = fs::File::open(path).map_err(|e| Error::RunDir {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dim: usize, arch: Option<&str>) -> CheckpointHeader {
        CheckpointHeader {
            dim,
            iteration: 3,
            seed: 42,
            arch: arch.map(str::to_string),
        }
    }

    #[test]
    fn exact_layout() {
        let p = ParamVector::new(vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &header(2, Some("policy 1,2 tanh")), &p).unwrap();
        let text_len = "ZOPRO1\ndim 2\niteration 3\nseed 42\narch policy 1,2 tanh\ndata\n".len();
        assert_eq!(&buf[..text_len], b"ZOPRO1\ndim 2\niteration 3\nseed 42\narch policy 1,2 tanh\ndata\n");
        assert_eq!(&buf[text_len..text_len + 8], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), text_len + 16);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = ParamVector::new(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &header(2, None), &p).unwrap();
        buf.pop();
        assert!(matches!(read_checkpoint(&buf[..]), Err(Error::Checkpoint(_))));
        assert!(matches!(read_checkpoint(&b"ZOPRO2\n"[..]), Err(Error::Checkpoint(_))));
        assert!(write_checkpoint(Vec::new(), &header(3, None), &p).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(-1e300..1e300f64, 1..64), arch in prop::option::of("[a-z0-9, ]{0,20}")) {
            let p = ParamVector::new(values).unwrap();
            let h = CheckpointHeader { dim: p.dim(), iteration: 9, seed: u64::MAX, arch };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &h, &p).unwrap();
            let (h2, p2) = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(h2, h);
            let bits = |v: &ParamVector| v.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&p2), bits(&p));
        }
    }
}
