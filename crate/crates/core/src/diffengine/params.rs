use std::sync::Arc;

use super::DiffError;

/// A named, contiguous slice of the flat parameter array, viewed as a
/// row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SegmentId(pub(crate) usize);

impl SegmentId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> SegmentId {
        let id = SegmentId(self.segments.len());
        self.segments.push(Segment {
            name: name.into(),
            offset: self.len,
            rows,
            cols,
        });
        self.len += rows * cols;
        id
    }

    pub fn build(self) -> ParamLayout {
        ParamLayout {
            segments: self.segments,
            len: self.len,
        }
    }
}

/// Segment table for a [`ParamVector`]. Segments tile `0..len` exactly, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParamLayout {
    /// Rebuilds a layout from an explicit table, checking that the segments
    /// partition the array without gaps or overlap.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self, DiffError> {
        let mut cursor = 0;
        for seg in &segments {
            if seg.offset != cursor {
                return Err(DiffError::Layout(format!(
                    "segment `{}` starts at {} but previous segment ends at {}",
                    seg.name, seg.offset, cursor
                )));
            }
            cursor += seg.len();
        }
        Ok(Self {
            segments,
            len: cursor,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }

    pub fn find(&self, name: &str) -> Option<SegmentId> {
        self.segments.iter().position(|s| s.name == name).map(SegmentId)
    }

    /// Segment containing flat index `i`.
    pub fn segment_of(&self, i: usize) -> Option<SegmentId> {
        self.segments
            .iter()
            .position(|s| s.range().contains(&i))
            .map(SegmentId)
    }
}

/// Flat parameter storage with a shared, fixed layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<ParamLayout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<ParamLayout>) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self, DiffError> {
        if values.len() != layout.len() {
            return Err(DiffError::Layout(format!(
                "expected {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn segment(&self, id: SegmentId) -> &[f64] {
        &self.values[self.layout.segment(id).range()]
    }

    pub fn segment_mut(&mut self, id: SegmentId) -> &mut [f64] {
        let range = self.layout.segment(id).range();
        &mut self.values[range]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_partitions_exactly() {
        let mut b = LayoutBuilder::new();
        let w = b.push("w", 3, 2);
        let bias = b.push("b", 1, 3);
        let layout = b.build();
        assert_eq!(layout.len(), 9);
        assert_eq!(layout.segment(w).range(), 0..6);
        assert_eq!(layout.segment(bias).range(), 6..9);
        assert_eq!(layout.segment_of(7), Some(bias));
        assert_eq!(layout.find("b"), Some(bias));
    }

    #[test]
    fn from_segments_rejects_gaps_and_overlap() {
        let seg = |name: &str, offset, rows| Segment {
            name: name.into(),
            offset,
            rows,
            cols: 1,
        };
        assert!(ParamLayout::from_segments(vec![seg("a", 0, 2), seg("b", 3, 1)]).is_err());
        assert!(ParamLayout::from_segments(vec![seg("a", 0, 2), seg("b", 1, 1)]).is_err());
        let ok = ParamLayout::from_segments(vec![seg("a", 0, 2), seg("b", 2, 1)]).unwrap();
        assert_eq!(ok.len(), 3);
    }

    #[test]
    fn from_values_checks_length() {
        let mut b = LayoutBuilder::new();
        b.push("x", 2, 1);
        let layout = Arc::new(b.build());
        assert!(ParamVector::from_values(layout.clone(), vec![1.0]).is_err());
        assert!(ParamVector::from_values(layout, vec![1.0, 2.0]).is_ok());
    }
}
