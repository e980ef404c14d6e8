//! JSON-lines dataset files, one example per line:
//!
//! ```json
//! {"x_tokens":["i0_1"],"x_attrs":[{"type":"entity","tokens":["i0_4"]}],
//!  "y_tokens":["i0_2"],"y_attrs":[],"label":1,
//!  "meta":{"latent_x":[0],"latent_y":[0]}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Attribute, AttributedText, DataError, MatchExample, Vocab, UNK};

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub examples: Vec<MatchExample>,
    /// Tokens not found in the vocabulary, mapped to `[UNK]`.
    pub unknown_tokens: usize,
}

fn side_json(t: &AttributedText, vocab: &Vocab) -> (Value, Value) {
    let words = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>();
    let attrs = t.attributes.iter().map(|a| json!({"type": a.attr_type, "tokens": words(&a.tokens)})).collect();
    (json!(words(&t.tokens)), Value::Array(attrs))
}

pub fn write_dataset<W: Write>(mut w: W, examples: &[MatchExample], vocab: &Vocab) -> Result<(), DataError> {
    for e in examples {
        let (xt, xa) = side_json(&e.x, vocab);
        let (yt, ya) = side_json(&e.y, vocab);
        let record = json!({
            "x_tokens": xt,
            "x_attrs": xa,
            "y_tokens": yt,
            "y_attrs": ya,
            "label": e.label,
            "meta": {"latent_x": e.latent_x, "latent_y": e.latent_y},
        });
        writeln!(w, "{record}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, examples: &[MatchExample], vocab: &Vocab) -> Result<(), DataError> {
    write_dataset(BufWriter::new(File::create(path)?), examples, vocab)
}

struct LineParser<'a> {
    line: usize,
    vocab: &'a Vocab,
    unknown: usize,
}

impl LineParser<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> DataError {
        DataError::Parse { line: self.line, field: field.to_string(), message: message.into() }
    }

    fn field<'v>(&self, obj: &'v Map<String, Value>, field: &str) -> Result<&'v Value, DataError> {
        obj.get(field).ok_or_else(|| self.err(field, "missing"))
    }

    fn tokens(&mut self, v: &Value, field: &str) -> Result<Vec<usize>, DataError> {
        let arr = v.as_array().ok_or_else(|| self.err(field, "expected an array of tokens"))?;
        let mut out = Vec::with_capacity(arr.len());
        for t in arr {
            let s = t.as_str().ok_or_else(|| self.err(field, format!("token {t} is not a string")))?;
            let id = self.vocab.id_or_unk(s);
            if id == UNK && s != "[UNK]" {
                self.unknown += 1;
            }
            out.push(id);
        }
        if out.is_empty() {
            return Err(self.err(field, "token list is empty"));
        }
        Ok(out)
    }

    fn side(&mut self, obj: &Map<String, Value>, prefix: &str) -> Result<AttributedText, DataError> {
        let tok_field = format!("{prefix}_tokens");
        let attr_field = format!("{prefix}_attrs");
        let tokens = self.tokens(self.field(obj, &tok_field)?, &tok_field)?;
        let attrs = self
            .field(obj, &attr_field)?
            .as_array()
            .ok_or_else(|| self.err(&attr_field, "expected an array"))?;
        let mut attributes = Vec::with_capacity(attrs.len());
        for a in attrs {
            let a = a.as_object().ok_or_else(|| self.err(&attr_field, "attribute is not an object"))?;
            let attr_type = a
                .get("type")
                .and_then(Value::as_str)
                .ok_or_else(|| self.err(&format!("{attr_field}.type"), "missing or not a string"))?
                .to_string();
            let tfield = format!("{attr_field}.tokens");
            let tokens = self.tokens(a.get("tokens").ok_or_else(|| self.err(&tfield, "missing"))?, &tfield)?;
            attributes.push(Attribute { attr_type, tokens });
        }
        Ok(AttributedText { tokens, attributes })
    }

    fn latent(&self, meta: Option<&Value>, field: &str) -> Result<Vec<usize>, DataError> {
        let Some(v) = meta.and_then(|m| m.get(field)) else { return Ok(Vec::new()) };
        let full = format!("meta.{field}");
        v.as_array()
            .ok_or_else(|| self.err(&full, "expected an array"))?
            .iter()
            .map(|k| k.as_u64().map(|k| k as usize).ok_or_else(|| self.err(&full, format!("bad intent id {k}"))))
            .collect()
    }

    fn example(&mut self, text: &str) -> Result<MatchExample, DataError> {
        let value: Value = serde_json::from_str(text).map_err(|e| self.err("<record>", e.to_string()))?;
        let obj = value.as_object().ok_or_else(|| self.err("<record>", "expected a JSON object"))?;
        let x = self.side(obj, "x")?;
        let y = self.side(obj, "y")?;
        let label = match self.field(obj, "label")?.as_u64() {
            Some(0) => 0,
            Some(1) => 1,
            _ => return Err(self.err("label", format!("expected 0 or 1, got {}", obj["label"]))),
        };
        let meta = obj.get("meta");
        Ok(MatchExample {
            x,
            y,
            label,
            latent_x: self.latent(meta, "latent_x")?,
            latent_y: self.latent(meta, "latent_y")?,
        })
    }
}

pub fn read_dataset<R: BufRead>(r: R, vocab: &Vocab) -> Result<LoadedDataset, DataError> {
    let mut parser = LineParser { line: 0, vocab, unknown: 0 };
    let mut examples = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        parser.line = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parser.example(&line)?);
    }
    Ok(LoadedDataset { examples, unknown_tokens: parser.unknown })
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocab) -> Result<LoadedDataset, DataError> {
    read_dataset(BufReader::new(File::open(path)?), vocab)
}

#[cfg(test)]
mod tests {
    use super::super::{build_vocab, generate_corpus, CorpusSpec};
    use super::*;

    fn vocab() -> Vocab {
        build_vocab(&CorpusSpec::default())
    }

    #[test]
    fn empty_round_trip() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &[], &vocab()).unwrap();
        assert!(buf.is_empty());
        assert!(read_dataset(buf.as_slice(), &vocab()).unwrap().examples.is_empty());
    }

    #[test]
    fn generated_examples_round_trip() {
        let spec = CorpusSpec { num_train: 1000, num_valid: 0, num_test: 0, ..Default::default() };
        let corpus = generate_corpus(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &corpus.train, &vocab()).unwrap();
        let back = read_dataset(buf.as_slice(), &vocab()).unwrap();
        assert_eq!(back.unknown_tokens, 0);
        assert_eq!(back.examples, corpus.train);
    }

    #[test]
    fn bad_label_cites_its_line() {
        let good = r#"{"x_tokens":["i0_0"],"x_attrs":[],"y_tokens":["i1_0"],"y_attrs":[],"label":1}"#;
        let bad = good.replace("\"label\":1", "\"label\":2");
        let text = [good; 6].join("\n") + "\n" + &bad + "\n";
        match read_dataset(text.as_bytes(), &vocab()) {
            Err(DataError::Parse { line, field, .. }) => {
                assert_eq!(line, 7);
                assert_eq!(field, "label");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"x_tokens":["i0_0"],"x_attrs":[],"y_attrs":[],"label":0}"#;
        match read_dataset(text.as_bytes(), &vocab()) {
            Err(DataError::Parse { line: 1, field, .. }) => assert_eq!(field, "y_tokens"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_map_to_unk_and_are_counted() {
        let text = r#"{"x_tokens":["i0_0","zzz"],"x_attrs":[{"type":"entity","tokens":["qqq"]}],"y_tokens":["i1_0"],"y_attrs":[],"label":0}"#;
        let loaded = read_dataset(text.as_bytes(), &vocab()).unwrap();
        assert_eq!(loaded.unknown_tokens, 2);
        assert_eq!(loaded.examples[0].x.tokens[1], UNK);
        assert_eq!(loaded.examples[0].x.attributes[0].tokens, vec![UNK]);
    }
}
