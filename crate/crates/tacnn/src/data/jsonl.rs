//! JSONL sample store: one object per line with the same fields as SKB1,
//! the coordinate array nested `[M'][C][T][V]`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::SkeletonSample;
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Serialize, Deserialize)]
struct JsonlSample {
    id: String,
    label: Vec<f32>,
    data: Vec<Vec<Vec<Vec<f32>>>>,
}

fn to_record(s: &SkeletonSample) -> JsonlSample {
    let d = s.dims();
    let data = s
        .persons
        .iter()
        .map(|p| {
            (0..d[1])
                .map(|c| {
                    (0..d[2])
                        .map(|t| (0..d[3]).map(|v| p.at([0, c, t, v])).collect())
                        .collect()
                })
                .collect()
        })
        .collect();
    JsonlSample { id: s.id.clone(), label: s.label.clone(), data }
}

fn from_record(rec: JsonlSample, line: usize) -> Result<SkeletonSample> {
    let ragged = || Error::Parse { line, msg: format!("ragged data array in sample {}", rec.id) };
    if rec.data.is_empty() {
        return Err(Error::Parse { line, msg: format!("sample {} has no persons", rec.id) });
    }
    let c = rec.data[0].len();
    let t = rec.data[0].first().map_or(0, |x| x.len());
    let v = rec.data[0].first().and_then(|x| x.first()).map_or(0, |x| x.len());
    if c == 0 || t == 0 || v == 0 {
        return Err(ragged());
    }
    let mut persons = Vec::with_capacity(rec.data.len());
    for person in &rec.data {
        if person.len() != c {
            return Err(ragged());
        }
        let mut flat = Vec::with_capacity(c * t * v);
        for chan in person {
            if chan.len() != t {
                return Err(ragged());
            }
            for row in chan {
                if row.len() != v {
                    return Err(ragged());
                }
                flat.extend_from_slice(row);
            }
        }
        persons.push(
            Tensor4::from_vec([1, c, t, v], flat)
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?,
        );
    }
    SkeletonSample::new(rec.id, rec.label, persons)
        .map_err(|e| Error::Parse { line, msg: e.to_string() })
}

pub fn write_jsonl<W: Write>(w: &mut W, samples: &[SkeletonSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut *w, &to_record(s))?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SkeletonSample>> {
    let mut samples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlSample = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        samples.push(from_record(rec, i + 1)?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::skb1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn sample(seed: u64) -> SkeletonSample {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        SkeletonSample::new(
            format!("s{seed}"),
            vec![0.5, 0.5],
            vec![Tensor4::rand_uniform([1, 3, 4, 5], -1.0, 1.0, &mut rng)],
        )
        .unwrap()
    }

    #[test]
    fn jsonl_roundtrip_preserves_f32_values() {
        let s = sample(1);
        let mut buf = Vec::new();
        write_jsonl(&mut buf, std::slice::from_ref(&s)).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back[0].id, s.id);
        assert_eq!(back[0].persons[0].data(), s.persons[0].data());
    }

    #[test]
    fn jsonl_and_skb1_agree_to_f32_precision() {
        let samples: Vec<SkeletonSample> = (0..3).map(sample).collect();
        let mut jbuf = Vec::new();
        write_jsonl(&mut jbuf, &samples).unwrap();
        let via_json = read_jsonl(&jbuf[..]).unwrap();
        let mut bbuf = Vec::new();
        skb1::write_skb1(&mut bbuf, &via_json).unwrap();
        let via_both = skb1::read_skb1(&bbuf[..]).unwrap();
        for (a, b) in via_both.iter().zip(samples.iter()) {
            assert_eq!(a.label, b.label);
            for (pa, pb) in a.persons.iter().zip(b.persons.iter()) {
                let bits_a: Vec<u32> = pa.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = pb.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn ragged_or_invalid_lines_are_rejected_with_line_numbers() {
        let bad = r#"{"id":"x","label":[1.0],"data":[[[[1.0],[2.0,3.0]]]]}"#;
        match read_jsonl(bad.as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
        let not_json = "hello\n";
        assert!(matches!(read_jsonl(not_json.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }
}
