//! Parameter checkpoints: a plain-text header followed by little-endian `f32`s.
//!
//! ```text
//! SDFMESH-PARAMS 1
//! segments 2
//! sdf.0.weight 0 384 128 3
//! sdf.0.bias 384 128 1 128
//! end
//! <512 little-endian f32 values>
//! ```
//!
//! Each table row is `name offset length rows cols`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::FieldError;
use crate::diffengine::{ParamLayout, ParamVector, Segment};

pub const MAGIC: &str = "SDFMESH-PARAMS 1";

pub fn write_params<W: Write>(mut w: W, params: &ParamVector) -> Result<(), FieldError> {
    let layout = params.layout();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "segments {}", layout.segments().len())?;
    for seg in layout.segments() {
        if seg.name.split_whitespace().count() != 1 {
            return Err(FieldError::Checkpoint(format!(
                "segment name `{}` must be a single token",
                seg.name
            )));
        }
        writeln!(
            w,
            "{} {} {} {} {}",
            seg.name,
            seg.offset,
            seg.len(),
            seg.rows,
            seg.cols
        )?;
    }
    writeln!(w, "end")?;
    let mut bytes = Vec::with_capacity(params.len() * 4);
    for v in params.values() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> FieldError {
    FieldError::Checkpoint(msg.into())
}

pub fn read_params<R: Read>(r: R) -> Result<ParamVector, FieldError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String, FieldError> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(bad("missing magic string"));
    }
    let count_line = next_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("segments ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(format!("malformed segment count `{count_line}`")))?;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let row = next_line(&mut r)?;
        let fields: Vec<&str> = row.split_whitespace().collect();
        let [name, offset, len, rows, cols] = fields[..] else {
            return Err(bad(format!("malformed segment row `{row}`")));
        };
        let num = |s: &str| -> Result<usize, FieldError> {
            s.parse().map_err(|_| bad(format!("bad number `{s}` in `{row}`")))
        };
        let seg = Segment {
            name: name.to_string(),
            offset: num(offset)?,
            rows: num(rows)?,
            cols: num(cols)?,
        };
        if seg.len() != num(len)? {
            return Err(bad(format!("segment `{name}` length disagrees with its shape")));
        }
        segments.push(seg);
    }
    if next_line(&mut r)? != "end" {
        return Err(bad("missing `end` after segment table"));
    }
    let layout = ParamLayout::from_segments(segments).map_err(|e| bad(e.to_string()))?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != layout.len() * 4 {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            layout.len() * 4,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ParamVector::from_values(Arc::new(layout), values).map_err(|e| bad(e.to_string()))
}

pub fn save(path: &Path, params: &ParamVector) -> Result<(), FieldError> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamVector, FieldError> {
    read_params(std::fs::File::open(path)?)
}

/// Rounds every value to `f32`, the precision a checkpoint stores.
pub fn quantize(params: &mut ParamVector) {
    for v in params.values_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::LayoutBuilder;
    use proptest::prelude::*;

    fn layout() -> Arc<ParamLayout> {
        let mut b = LayoutBuilder::new();
        b.push("a.weight", 2, 3);
        b.push("a.bias", 1, 2);
        b.push("tail", 1, 1);
        Arc::new(b.build())
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 9)) {
            let p = ParamVector::from_values(layout(), values.iter().map(|v| *v as f64).collect()).unwrap();
            let mut first = Vec::new();
            write_params(&mut first, &p).unwrap();
            let back = read_params(&first[..]).unwrap();
            prop_assert_eq!(&back, &p);
            let mut second = Vec::new();
            write_params(&mut second, &back).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn rejects_truncated_data_and_bad_magic() {
        let p = ParamVector::zeros(layout());
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        assert!(read_params(&buf[..buf.len() - 1]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_params(&wrong[..]).is_err());
    }

    #[test]
    fn header_lists_name_offset_length() {
        let p = ParamVector::zeros(layout());
        let mut buf = Vec::new();
        write_params(&mut buf, &p).unwrap();
        let text = String::from_utf8_lossy(&buf[..60]);
        assert!(text.starts_with("SDFMESH-PARAMS 1\nsegments 3\na.weight 0 6 2 3\n"));
    }
}
