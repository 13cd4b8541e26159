//! The published comparison tables used as report fixtures.

use simclr_s2_core::eval::{StudyMetric, StudyRow, StudyTable};

pub const PRECISION_ROWS: [(usize, f64, f64); 6] = [
    (190, 0.99, 0.11),
    (570, 1.00, 0.2),
    (1902, 0.99, 0.36),
    (4756, 0.98, 0.95),
    (9515, 1.00, 0.78),
    (19024, 1.00, 0.47),
];

pub const RECALL_ROWS: [(&str, usize, f64, f64); 5] = [
    ("Brazil", 190, 0.75, 0.5),
    ("India", 190, 0.9, 0.67),
    ("Indonesia", 570, 0.76, 0.07),
    ("Tunisia", 570, 0.78, 0.91),
    ("Vietnam, Myanmar", 190, 0.9, 0.00),
];

pub fn precision_table() -> StudyTable {
    StudyTable {
        metric: StudyMetric::Precision,
        rows: PRECISION_ROWS
            .iter()
            .map(|&(n, s, u)| StudyRow { region: None, training_size: n, self_supervised: s, supervised: u })
            .collect(),
        note: None,
    }
}

pub fn recall_table() -> StudyTable {
    StudyTable {
        metric: StudyMetric::Recall,
        rows: RECALL_ROWS
            .iter()
            .map(|&(c, n, s, u)| StudyRow {
                region: Some(c.into()),
                training_size: n,
                self_supervised: s,
                supervised: u,
            })
            .collect(),
        note: None,
    }
}

pub fn golden(name: &str) -> Vec<u8> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
