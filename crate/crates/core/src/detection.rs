use serde::{Deserialize, Serialize};

/// One gridless detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub angle_deg: f64,
    pub magnitude_db: f64,
    /// Detection probability in (0, 1).
    pub confidence: f64,
}

/// Set of predicted `(angle, magnitude, confidence)` triples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub detections: Vec<Detection>,
}

impl DetectionSet {
    pub fn new(detections: Vec<Detection>) -> Self {
        Self { detections }
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Detection> {
        self.detections.iter()
    }

    pub fn angles(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.angle_deg).collect()
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.magnitude_db).collect()
    }

    pub fn confidences(&self) -> Vec<f64> {
        self.detections.iter().map(|d| d.confidence).collect()
    }

    /// Detections with confidence at or above `threshold`.
    pub fn above(&self, threshold: f64) -> impl Iterator<Item = &Detection> {
        self.detections
            .iter()
            .filter(move |d| d.confidence >= threshold)
    }

    /// Copy sorted by confidence, highest first.
    pub fn sorted_by_confidence(&self) -> DetectionSet {
        let mut d = self.detections.clone();
        d.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        DetectionSet::new(d)
    }
}

impl<'a> IntoIterator for &'a DetectionSet {
    type Item = &'a Detection;
    type IntoIter = std::slice::Iter<'a, Detection>;

    fn into_iter(self) -> Self::IntoIter {
        self.detections.iter()
    }
}
