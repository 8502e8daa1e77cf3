use std::fmt;

use crate::error::{Error, Result};
use crate::guidance::Stage;
use crate::table::{fmt_float, TextTable};

/// Which pass and stage a trace row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Weak-guidance pseudo-label pass.
    PseudoLabel,
    Guided(Stage),
}

impl Phase {
    pub fn tag(self) -> &'static str {
        match self {
            Phase::PseudoLabel => "P",
            Phase::Guided(s) => s.tag(),
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "P" => Some(Phase::PseudoLabel),
            "I" => Some(Phase::Guided(Stage::Restoration)),
            "II" => Some(Phase::Guided(Stage::RestorationColor)),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One row per timestep (the kept draw when repeats are enabled).
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub phase: Phase,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// L2 norms of the three term gradients.
    pub grad_norms: [f64; 3],
    /// Gradient mass that landed where a term must be silent:
    /// `sum |dL1|` on `M`, `sum |dL2|` outside `E(M_guide)`, `sum |dL3|` outside skin.
    pub leaks: [f64; 3],
}

pub const TRACE_COLUMNS: [&str; 11] = [
    "t", "stage", "l1", "l2", "l3", "g1", "g2", "g3", "leak1", "leak2", "leak3",
];

impl StepTrace {
    pub fn cells(&self) -> Vec<String> {
        let mut row = vec![self.t.to_string(), self.phase.tag().to_string()];
        row.extend(
            [self.l1, self.l2, self.l3]
                .iter()
                .chain(&self.grad_norms)
                .chain(&self.leaks)
                .map(|v| fmt_float(*v)),
        );
        row
    }

    pub fn from_cells(cells: &[String]) -> Result<Self> {
        if cells.len() != TRACE_COLUMNS.len() {
            return Err(Error::Format(format!("trace row has {} cells", cells.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?} in column {}", cells[i], TRACE_COLUMNS[i])))
        };
        Ok(Self {
            t: cells[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad timestep {:?}", cells[0])))?,
            phase: Phase::from_tag(&cells[1])
                .ok_or_else(|| Error::Format(format!("unknown stage tag {:?}", cells[1])))?,
            l1: num(2)?,
            l2: num(3)?,
            l3: num(4)?,
            grad_norms: [num(5)?, num(6)?, num(7)?],
            leaks: [num(8)?, num(9)?, num(10)?],
        })
    }

    pub fn line(&self) -> String {
        self.cells().join(" ")
    }
}

/// Renders a trace with `# key=value` header lines.
pub fn trace_table(meta: &[(String, String)], rows: &[StepTrace]) -> TextTable {
    let mut table = TextTable::new(&TRACE_COLUMNS);
    table.meta = meta.to_vec();
    table.rows = rows.iter().map(StepTrace::cells).collect();
    table
}

/// `key=value` header pairs of a table.
pub type Meta = Vec<(String, String)>;

pub fn parse_trace(text: &str) -> Result<(Meta, Vec<StepTrace>)> {
    let table = TextTable::parse(text)?;
    if table.columns != TRACE_COLUMNS {
        return Err(Error::Format(format!("unexpected trace columns {:?}", table.columns)));
    }
    let rows = table.rows.iter().map(|r| StepTrace::from_cells(r)).collect::<Result<_>>()?;
    Ok((table.meta, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_round_trip() {
        let row = StepTrace {
            t: 400,
            phase: Phase::Guided(Stage::RestorationColor),
            l1: 1.5,
            l2: 0.0,
            l3: 2e-7,
            grad_norms: [0.1, 0.2, 0.3],
            leaks: [0.0; 3],
        };
        let text = trace_table(&[("seed".into(), "3".into())], std::slice::from_ref(&row)).render();
        assert!(text.starts_with("# seed=3\nt stage l1 l2 l3 g1 g2 g3 leak1 leak2 leak3\n400 II "));
        let (meta, rows) = parse_trace(&text).unwrap();
        assert_eq!(meta, vec![("seed".to_string(), "3".to_string())]);
        assert_eq!(rows, vec![row]);
    }
}
