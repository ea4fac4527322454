//! Reader for the public `.skeleton` text layout: a frame count, then per
//! frame a body count, and per body an info line (body id plus tracking
//! metadata), a joint count, and one line per joint starting with the 3-D
//! position. Auxiliary per-joint fields (depth/color-space projections,
//! orientation, tracking state) are discarded.

use std::io::BufRead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NtuBody {
    pub id: String,
    /// `[x, y, z]` per joint, meters in the camera frame.
    pub joints: Vec<[f32; 3]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NtuFrame {
    pub bodies: Vec<NtuBody>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NtuClip {
    pub frames: Vec<NtuFrame>,
}

struct Lines<R: BufRead> {
    reader: R,
    line_no: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R) -> Self {
        Lines { reader, line_no: 0, buf: String::new() }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line_no, msg: msg.into() }
    }

    fn next_line(&mut self) -> Result<&str> {
        self.buf.clear();
        self.line_no += 1;
        let n = self
            .reader
            .read_line(&mut self.buf)
            .map_err(|e| Error::Parse { line: self.line_no, msg: format!("read failed: {e}") })?;
        if n == 0 {
            return Err(self.err("truncated file: unexpected end of input"));
        }
        Ok(self.buf.trim_end_matches(['\r', '\n']))
    }

    fn next_count(&mut self, what: &str) -> Result<usize> {
        let line = self.next_line()?.trim().to_string();
        line.parse::<usize>().map_err(|_| self.err(format!("expected {what}, got '{line}'")))
    }
}

/// Parses a whole `.skeleton` stream. Fails with the offending line number
/// on truncation, malformed numbers, or joint counts that change between
/// bodies.
pub fn parse_ntu_skeleton<R: BufRead>(reader: R) -> Result<NtuClip> {
    let mut lines = Lines::new(reader);
    let frame_count = lines.next_count("frame count")?;
    let mut clip = NtuClip::default();
    let mut joint_count: Option<usize> = None;
    for _ in 0..frame_count {
        let body_count = lines.next_count("body count")?;
        let mut frame = NtuFrame::default();
        for _ in 0..body_count {
            let info = lines.next_line()?;
            let id = match info.split_whitespace().next() {
                Some(tok) => tok.to_string(),
                None => return Err(lines.err("empty body info line")),
            };
            let jc = lines.next_count("joint count")?;
            match joint_count {
                None => joint_count = Some(jc),
                Some(expected) if expected != jc => {
                    return Err(lines.err(format!(
                        "inconsistent joint count: {jc} after {expected}"
                    )));
                }
                _ => {}
            }
            let mut joints = Vec::new();
            for _ in 0..jc {
                let line = lines.next_line()?.to_string();
                let mut it = line.split_whitespace();
                let mut pos = [0.0f32; 3];
                for (c, slot) in pos.iter_mut().enumerate() {
                    let tok = it
                        .next()
                        .ok_or_else(|| lines.err(format!("joint line has fewer than {} fields", c + 1)))?;
                    *slot = tok
                        .parse::<f32>()
                        .map_err(|_| lines.err(format!("bad coordinate '{tok}'")))?;
                }
                joints.push(pos);
            }
            frame.bodies.push(NtuBody { id, joints });
        }
        clip.frames.push(frame);
    }
    Ok(clip)
}
