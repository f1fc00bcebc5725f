//! Text and CSV views of architecture logits.

use std::fmt::Write;

use msgdas_core::autograd::kernels::softmax;
use msgdas_core::searchspace::{count_skip_connect, derive_genotype, ArchParams, CellTopology, CellType, OpKind};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

/// Per-edge softmax of the logits, one row per edge.
pub fn heat_map(alpha: &ArchParams<f32>, cell: CellType) -> Result<Vec<Vec<f64>>> {
    let t = alpha.table(cell).cast::<f64>();
    Ok(softmax(&t, 1)?.data().chunks(OpKind::ALL.len()).map(<[f64]>::to_vec).collect())
}

fn cell_name(cell: CellType) -> &'static str {
    match cell {
        CellType::Normal => "normal",
        CellType::Reduce => "reduce",
    }
}

pub fn render(alpha: &ArchParams<f32>, format: Format) -> Result<String> {
    let g = derive_genotype(alpha);
    let counts = count_skip_connect(&g);
    let mut s = String::new();
    match format {
        Format::Text => {
            writeln!(s, "skip_connect normal {} reduce {}", counts.normal, counts.reduce).ok();
            for cell in CellType::BOTH {
                let pairs: Vec<String> = g.cell(cell).iter().map(|(p, op)| format!("{p}:{op}")).collect();
                writeln!(s, "genotype {} {}", cell_name(cell), pairs.join(" ")).ok();
            }
            for cell in CellType::BOTH {
                writeln!(s, "\n{} cell, softmax(alpha) per edge", cell_name(cell)).ok();
                write!(s, "{:<6}", "edge").ok();
                for op in OpKind::ALL {
                    write!(s, " {:>12}", op.to_string()).ok();
                }
                s.push('\n');
                for (e, row) in CellTopology::edges().zip(heat_map(alpha, cell)?) {
                    write!(s, "{:<6}", format!("{}->{}", e.from, e.to)).ok();
                    for v in row {
                        write!(s, " {v:>12.4}").ok();
                    }
                    s.push('\n');
                }
            }
        }
        Format::Csv => {
            s.push_str("cell,from,to");
            for op in OpKind::ALL {
                write!(s, ",{op}").ok();
            }
            s.push_str(",skip_connect_count\n");
            for cell in CellType::BOTH {
                let count = match cell {
                    CellType::Normal => counts.normal,
                    CellType::Reduce => counts.reduce,
                };
                for (e, row) in CellTopology::edges().zip(heat_map(alpha, cell)?) {
                    write!(s, "{},{},{}", cell_name(cell), e.from, e.to).ok();
                    for v in row {
                        write!(s, ",{v}").ok();
                    }
                    writeln!(s, ",{count}").ok();
                }
            }
        }
    }
    Ok(s)
}
