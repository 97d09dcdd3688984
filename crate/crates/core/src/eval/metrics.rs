use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-round record: the server's model after aggregation, the proxy the
/// clients would receive from that state, and the traffic of the round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_val_loss: f64,
    pub proxy_val_loss: f64,
    pub global_test_loss: f64,
    pub proxy_test_loss: f64,
    pub global_test_acc: Option<f64>,
    pub proxy_test_acc: Option<f64>,
    pub broadcast_bytes: u64,
    pub upload_bytes: u64,
    pub participants: Vec<usize>,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "round",
    "global_val_loss",
    "proxy_val_loss",
    "global_test_loss",
    "proxy_test_loss",
    "global_test_acc",
    "proxy_test_acc",
    "broadcast_bytes",
    "upload_bytes",
    "participants",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes one row per round. Floats use the shortest representation that
/// parses back to the same value; accuracy is empty for regression and
/// participants are `;`-joined.
pub fn write_metrics_csv<W: Write>(history: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for m in history {
        let participants = m
            .participants
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            m.round.to_string(),
            m.global_val_loss.to_string(),
            m.proxy_val_loss.to_string(),
            m.global_test_loss.to_string(),
            m.proxy_test_loss.to_string(),
            opt(m.global_test_acc),
            opt(m.proxy_test_acc),
            m.broadcast_bytes.to_string(),
            m.upload_bytes.to_string(),
            participants,
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |what: String| Error::InvalidArgument(format!("metrics csv: {what}"));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(bad(format!("unexpected columns {headers:?}")));
    }
    let mut out = Vec::new();
    for record in r.records() {
        let rec = record.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let float = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("column {} = {:?}", CSV_COLUMNS[i], field(i))))
        };
        let optional = |i: usize| -> Result<Option<f64>> {
            if field(i).is_empty() {
                Ok(None)
            } else {
                float(i).map(Some)
            }
        };
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse()
                .map_err(|_| bad(format!("column {} = {:?}", CSV_COLUMNS[i], field(i))))
        };
        let participants = if field(9).is_empty() {
            Vec::new()
        } else {
            field(9)
                .split(';')
                .map(|s| s.parse().map_err(|_| bad(format!("participant {s:?}"))))
                .collect::<Result<_>>()?
        };
        out.push(RoundMetrics {
            round: int(0)? as usize,
            global_val_loss: float(1)?,
            proxy_val_loss: float(2)?,
            global_test_loss: float(3)?,
            proxy_test_loss: float(4)?,
            global_test_acc: optional(5)?,
            proxy_test_acc: optional(6)?,
            broadcast_bytes: int(7)?,
            upload_bytes: int(8)?,
            participants,
        });
    }
    Ok(out)
}
