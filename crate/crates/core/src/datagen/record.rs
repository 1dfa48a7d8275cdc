//! FLXG region dataset files.
//!
//! Header: magic `FLXG`, version u16 = 1, record count u32. Each record is the
//! center (3 x f64), point count u16, points (3 x f32 each), label count u16
//! and labels as `dx dy dz theta gamma beta width score` (8 x f32). All
//! little-endian.

use super::{DatagenError, RegionSample, SampleLabel};
use crate::geometry::{RegionFrame, Vec3};

pub const MAGIC: &[u8; 4] = b"FLXG";
pub const VERSION: u16 = 1;

fn corrupt(msg: impl Into<String>) -> DatagenError {
    DatagenError::CorruptRecord(msg.into())
}

pub fn encode_record(sample: &RegionSample, out: &mut Vec<u8>) -> Result<(), DatagenError> {
    let np = u16::try_from(sample.points.len()).map_err(|_| DatagenError::InvalidConfig("more than 65535 points".into()))?;
    let nl = u16::try_from(sample.labels.len()).map_err(|_| DatagenError::InvalidConfig("more than 65535 labels".into()))?;
    for c in sample.frame.center.iter() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&np.to_le_bytes());
    for p in &sample.points {
        for c in p {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out.extend_from_slice(&nl.to_le_bytes());
    for l in &sample.labels {
        for c in l.to_array() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], DatagenError> {
        let end = self.pos + N;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(s.try_into().unwrap())
    }

    fn u16(&mut self) -> Result<u16, DatagenError> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    fn u32(&mut self) -> Result<u32, DatagenError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64, DatagenError> {
        let x = f64::from_le_bytes(self.take()?);
        if x.is_finite() { Ok(x) } else { Err(corrupt("non-finite value")) }
    }

    fn f32(&mut self) -> Result<f32, DatagenError> {
        let x = f32::from_le_bytes(self.take()?);
        if x.is_finite() { Ok(x) } else { Err(corrupt("non-finite value")) }
    }
}

fn read_record(r: &mut Reader) -> Result<RegionSample, DatagenError> {
    let center = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
    let np = r.u16()? as usize;
    let mut points = Vec::with_capacity(np);
    for _ in 0..np {
        points.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    let nl = r.u16()? as usize;
    let mut labels = Vec::with_capacity(nl);
    for _ in 0..nl {
        let mut a = [0f32; 8];
        for x in &mut a {
            *x = r.f32()?;
        }
        labels.push(SampleLabel::from_array(a));
    }
    Ok(RegionSample {
        frame: RegionFrame::new(center),
        points,
        labels,
    })
}

/// Decodes one record; returns it with the number of bytes consumed.
pub fn decode_record(bytes: &[u8]) -> Result<(RegionSample, usize), DatagenError> {
    let mut r = Reader { bytes, pos: 0 };
    let s = read_record(&mut r)?;
    Ok((s, r.pos))
}

pub fn encode_dataset(samples: &[RegionSample]) -> Result<Vec<u8>, DatagenError> {
    let count = u32::try_from(samples.len()).map_err(|_| DatagenError::InvalidConfig("too many records".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for s in samples {
        encode_record(s, &mut out)?;
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<RegionSample>, DatagenError> {
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        out.push(read_record(&mut r)?);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: usize, labels: usize, seed: u64) -> RegionSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RegionSample {
            frame: RegionFrame::new(Vec3::new(rng.random(), rng.random(), rng.random())),
            points: (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
            labels: (0..labels)
                .map(|_| {
                    let mut a = [0f32; 8];
                    a.iter_mut().for_each(|x| *x = rng.random_range(-0.01..0.01));
                    SampleLabel::from_array(a)
                })
                .collect(),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let set = vec![sample(40, 0, 1), sample(512, 20, 2)];
        let bytes = encode_dataset(&set).unwrap();
        assert_eq!(&bytes[..4], b"FLXG");
        assert_eq!(decode_dataset(&bytes).unwrap(), set);
        let mut one = Vec::new();
        encode_record(&set[1], &mut one).unwrap();
        assert_eq!(one.len(), 24 + 2 + 512 * 12 + 2 + 20 * 32);
        let (back, used) = decode_record(&one).unwrap();
        assert_eq!((back, used), (set[1].clone(), one.len()));
    }

    #[test]
    fn corrupt_inputs_fail() {
        let bytes = encode_dataset(&[sample(40, 3, 3)]).unwrap();
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(DatagenError::CorruptRecord(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DatagenError::CorruptRecord(_))));
        let mut nan = bytes.clone();
        nan[10..18].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_dataset(&nan), Err(DatagenError::CorruptRecord(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_dataset(&extra).is_err());
    }
}
