use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{KtError, Result};

/// One row of the input log with the raw ids from the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub question: u64,
    /// Empty when the source names no concept.
    pub concepts: Vec<u64>,
    pub response: u8,
    pub timestamp: i64,
}

/// Raw interactions grouped per student, each list in chronological order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawData {
    pub students: BTreeMap<u64, Vec<RawInteraction>>,
}

impl RawData {
    pub fn num_interactions(&self) -> usize {
        self.students.values().map(Vec::len).sum()
    }

    /// Sorts every student's list by timestamp, keeping insertion order on ties.
    pub fn sort_chronologically(&mut self) {
        for list in self.students.values_mut() {
            list.sort_by_key(|it| it.timestamp);
        }
    }
}

const HEADER: [&str; 5] = ["user_id", "question_id", "concept_ids", "response", "timestamp"];

pub fn ingest_csv(path: &Path) -> Result<RawData> {
    let file = File::open(path).map_err(|e| KtError::io(path, e))?;
    ingest_reader(file)
}

/// Parses `user_id,question_id,concept_ids,response,timestamp` rows.
///
/// Concept ids are `|`-separated; an empty field or `NA` means no concept.
/// Line numbers in errors count the header as line 1.
pub fn ingest_reader<R: Read>(reader: R) -> Result<RawData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| KtError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(KtError::Parse {
            line: 1,
            msg: format!("expected header `{}`", HEADER.join(",")),
        });
    }

    let mut data = RawData::default();
    for (row, record) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| KtError::Parse { line, msg: e.to_string() })?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let int = |i: usize| -> Result<i64> {
            field(i).parse::<i64>().map_err(|_| KtError::Parse {
                line,
                msg: format!("{}: `{}` is not an integer", HEADER[i], field(i)),
            })
        };
        let id = |i: usize| -> Result<u64> {
            field(i).parse::<u64>().map_err(|_| KtError::Parse {
                line,
                msg: format!("{}: `{}` is not a non-negative integer", HEADER[i], field(i)),
            })
        };

        let student = id(0)?;
        let question = id(1)?;
        let concepts = parse_concepts(field(2), line)?;
        let response = match int(3)? {
            0 => 0,
            1 => 1,
            other => {
                return Err(KtError::Value {
                    line,
                    msg: format!("response must be 0 or 1, got {other}"),
                })
            }
        };
        let timestamp = int(4)?;
        data.students.entry(student).or_default().push(RawInteraction {
            question,
            concepts,
            response,
            timestamp,
        });
    }
    data.sort_chronologically();
    Ok(data)
}

fn parse_concepts(field: &str, line: u64) -> Result<Vec<u64>> {
    if field.is_empty() || field.eq_ignore_ascii_case("na") {
        return Ok(Vec::new());
    }
    field
        .split('|')
        .map(|part| {
            part.trim().parse::<u64>().map_err(|_| KtError::Parse {
                line,
                msg: format!("concept_ids: `{part}` is not a non-negative integer"),
            })
        })
        .collect()
}

/// Writes `data` in the format [`ingest_reader`] accepts, students in id order.
pub fn write_csv<W: Write>(data: &RawData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| KtError::contract(format!("csv write failed: {e}"));
    w.write_record(HEADER).map_err(csv_err)?;
    for (student, list) in &data.students {
        for it in list {
            let concepts = if it.concepts.is_empty() {
                "NA".to_string()
            } else {
                it.concepts.iter().map(u64::to_string).collect::<Vec<_>>().join("|")
            };
            w.write_record([
                student.to_string(),
                it.question.to_string(),
                concepts,
                it.response.to_string(),
                it.timestamp.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| KtError::contract(format!("csv write failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RawData> {
        ingest_reader(text.as_bytes())
    }

    const HEAD: &str = "user_id,question_id,concept_ids,response,timestamp\n";

    #[test]
    fn header_only_is_empty() {
        assert_eq!(parse(HEAD).unwrap().num_interactions(), 0);
    }

    #[test]
    fn parses_multi_concept_row() {
        let data = parse(&format!("{HEAD}7,12,3|5,1,1000\n")).unwrap();
        assert_eq!(
            data.students[&7],
            vec![RawInteraction {
                question: 12,
                concepts: vec![3, 5],
                response: 1,
                timestamp: 1000
            }]
        );
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let text = format!("{HEAD}1,10,1,1,5\n1,11,1,0,3\n1,12,1,1,5\n1,13,1,0,5\n");
        let qs: Vec<u64> = parse(&text).unwrap().students[&1].iter().map(|i| i.question).collect();
        assert_eq!(qs, vec![11, 10, 12, 13]);
    }

    #[test]
    fn unnamed_concepts_are_empty() {
        let data = parse(&format!("{HEAD}1,2,NA,1,0\n1,3,,0,1\n")).unwrap();
        assert!(data.students[&1].iter().all(|i| i.concepts.is_empty()));
    }

    #[test]
    fn errors_carry_line_numbers() {
        match parse(&format!("{HEAD}1,2,3,1,0\n1,x,3,1,0\n")) {
            Err(KtError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse(&format!("{HEAD}1,2,3,2,0\n")) {
            Err(KtError::Value { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse(&format!("{HEAD}1,2,3,1\n")) {
            Err(KtError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse("a,b\n"), Err(KtError::Parse { line: 1, .. })));
    }

    #[test]
    fn write_then_read_round_trips() {
        let data = parse(&format!("{HEAD}4,1,2|3,1,10\n4,2,NA,0,11\n9,1,2,0,3\n")).unwrap();
        let mut buf = Vec::new();
        write_csv(&data, &mut buf).unwrap();
        assert_eq!(ingest_reader(buf.as_slice()).unwrap(), data);
    }
}
