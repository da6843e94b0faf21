//! HMM model files: JSON (default) and the compact `TRHM` binary container.
//!
//! JSON cannot carry `-inf`, so zero probabilities are written as `null`
//! and read back as `-inf`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Hmm;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"TRHM";
pub const BINARY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HmmFile {
    h: usize,
    v: usize,
    log_initial: Vec<Option<f64>>,
    log_transition: Vec<Vec<Option<f64>>>,
    log_emission: Vec<Vec<Option<f64>>>,
}

pub(crate) fn encode_logs(xs: &[f64]) -> Vec<Option<f64>> {
    xs.iter()
        .map(|&x| if x == f64::NEG_INFINITY { None } else { Some(x) })
        .collect()
}

pub(crate) fn decode_logs(xs: &[Option<f64>]) -> Vec<f64> {
    xs.iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect()
}

impl Hmm {
    pub fn to_json(&self) -> Result<String> {
        let file = HmmFile {
            h: self.h,
            v: self.v,
            log_initial: encode_logs(&self.log_initial),
            log_transition: self.log_transition.chunks(self.h).map(encode_logs).collect(),
            log_emission: self.log_emission.chunks(self.v).map(encode_logs).collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: HmmFile = serde_json::from_str(text)?;
        let flatten = |rows: &[Vec<Option<f64>>], width: usize, name: &str| -> Result<Vec<f64>> {
            if rows.len() != file.h || rows.iter().any(|r| r.len() != width) {
                return Err(Error::Input(format!("{name} must be {} rows of {width}", file.h)));
            }
            Ok(rows.iter().flat_map(|r| decode_logs(r)).collect())
        };
        let transition = flatten(&file.log_transition, file.h, "log_transition")?;
        let emission = flatten(&file.log_emission, file.v, "log_emission")?;
        Hmm::new(file.h, file.v, decode_logs(&file.log_initial), transition, emission)
    }

    /// Little-endian: magic, version u32, h u32, V u32, then initial,
    /// transition and emission as row-major f64.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        let h = u32::try_from(self.h).map_err(|_| Error::Input("h exceeds u32".into()))?;
        let v = u32::try_from(self.v).map_err(|_| Error::Input("V exceeds u32".into()))?;
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&h.to_le_bytes())?;
        out.write_all(&v.to_le_bytes())?;
        for x in self.log_initial.iter().chain(&self.log_transition).chain(&self.log_emission) {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        if &word != BINARY_MAGIC {
            return Err(Error::Input("not a TRHM model file".into()));
        }
        let mut read_u32 = |input: &mut R| -> Result<u32> {
            input.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut input)?;
        if version != BINARY_VERSION {
            return Err(Error::Input(format!("unsupported TRHM version {version}")));
        }
        let h = read_u32(&mut input)? as usize;
        let v = read_u32(&mut input)? as usize;
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; count * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let initial = read_f64s(h)?;
        let transition = read_f64s(h * h)?;
        let emission = read_f64s(h * v)?;
        Hmm::new(h, v, initial, transition, emission)
    }

    /// Loads either format, sniffing the binary magic.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(BINARY_MAGIC) {
            Self::read_binary(bytes.as_slice())
        } else {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
            Self::from_json(&text)
        }
    }

    /// Writes binary when the path ends in `.trhm`, JSON otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e == "trhm") {
            let file = std::fs::File::create(path)?;
            self.write_binary(std::io::BufWriter::new(file))
        } else {
            std::fs::write(path, self.to_json()?)?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_models::*;
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn json_and_binary_round_trip(seed in 0u64..10_000, h in 1usize..6, v in 2usize..8) {
            let hmm = seeded(seed, h, v);
            let back = Hmm::from_json(&hmm.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.fingerprint(), hmm.fingerprint());
            let mut buf = Vec::new();
            hmm.write_binary(&mut buf).unwrap();
            prop_assert_eq!(buf.len(), 16 + 8 * (h + h * h + h * v));
            let back = Hmm::read_binary(buf.as_slice()).unwrap();
            prop_assert_eq!(back.fingerprint(), hmm.fingerprint());
        }
    }

    #[test]
    fn zero_probabilities_survive_json() {
        let hmm = single_state(&[0.5, 0.5, 0.0]);
        let text = hmm.to_json().unwrap();
        assert!(text.contains("null"));
        let back = Hmm::from_json(&text).unwrap();
        assert_eq!(back.log_emission_row(0)[2], f64::NEG_INFINITY);
    }

    #[test]
    fn binary_header_layout() {
        let hmm = single_state(&[0.25; 4]);
        let mut buf = Vec::new();
        hmm.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TRHM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 4);
        assert!(Hmm::read_binary(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn malformed_json_rejected() {
        let bad = r#"{"h":1,"v":2,"log_initial":[0.0],"log_transition":[[0.0]],"log_emission":[[0.0]]}"#;
        assert!(Hmm::from_json(bad).is_err());
    }
}
