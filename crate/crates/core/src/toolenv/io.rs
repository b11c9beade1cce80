//! Corpus text files and JSONL episode logs.
//!
//! Corpus format, one record per line, `#` starts a comment:
//!
//! ```text
//! dartlab-corpus 1
//! grammar 1 2 3 4 5 6 7 8
//! vocab bos=0 is=9 q1=10 q2=11 keys=12+40 values=52+20
//! fact 12 53
//! question id=0 split=test hops=1 surface=10,12 answer=53 chain=12
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::corpus::{Corpus, Question, Split};
use super::episode::EpisodeRecord;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::router::{SegmentGrammar, TokenId};

const HEADER: &str = "dartlab-corpus";
const VERSION: u32 = 1;

fn join(ts: &[TokenId]) -> String {
    ts.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(",")
}

pub fn corpus_to_string(corpus: &Corpus) -> String {
    let v = &corpus.vocab;
    let g = v.grammar;
    let mut s = String::new();
    writeln!(s, "{HEADER} {VERSION}").unwrap();
    writeln!(
        s,
        "grammar {} {} {} {} {} {} {} {}",
        g.think_open,
        g.think_close,
        g.search_open,
        g.search_close,
        g.info_open,
        g.info_close,
        g.answer_open,
        g.answer_close
    )
    .unwrap();
    writeln!(
        s,
        "vocab bos={} is={} q1={} q2={} keys={}+{} values={}+{}",
        v.bos, v.is, v.single_hop, v.two_hop, v.key_start, v.n_keys, v.value_start, v.n_values
    )
    .unwrap();
    for (k, val) in corpus.facts() {
        writeln!(s, "fact {k} {val}").unwrap();
    }
    for q in &corpus.questions {
        writeln!(
            s,
            "question id={} split={} hops={} surface={} answer={} chain={}",
            q.id,
            q.split.as_str(),
            q.hops,
            join(&q.surface),
            join(&q.gold_answer),
            join(&q.gold_chain)
        )
        .unwrap();
    }
    s
}

pub fn parse_corpus(text: &str, path: &Path) -> Result<Corpus> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut grammar: Option<SegmentGrammar> = None;
    let mut vocab: Option<Vocabulary> = None;
    let mut facts = BTreeMap::new();
    let mut questions = Vec::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let kind = words.next().unwrap();
        let rest: Vec<&str> = words.collect();
        if !seen_header {
            if kind != HEADER {
                return Err(err(ln, format!("expected `{HEADER} {VERSION}` header")));
            }
            let ver: u32 = rest
                .first()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(ln, "missing version".into()))?;
            if ver != VERSION {
                return Err(err(ln, format!("unsupported corpus version {ver}")));
            }
            seen_header = true;
            continue;
        }
        match kind {
            "grammar" => {
                let ids: Vec<TokenId> = rest
                    .iter()
                    .map(|w| w.parse().map_err(|_| err(ln, format!("bad token id `{w}`"))))
                    .collect::<Result<_>>()?;
                if ids.len() != 8 {
                    return Err(err(ln, format!("grammar needs 8 ids, got {}", ids.len())));
                }
                grammar = Some(SegmentGrammar {
                    think_open: ids[0],
                    think_close: ids[1],
                    search_open: ids[2],
                    search_close: ids[3],
                    info_open: ids[4],
                    info_close: ids[5],
                    answer_open: ids[6],
                    answer_close: ids[7],
                });
            }
            "vocab" => {
                let f = fields(&rest).map_err(|m| err(ln, m))?;
                let get =
                    |k: &str| -> Result<&str> { f.get(k).copied().ok_or_else(|| err(ln, format!("missing `{k}`"))) };
                let num = |k: &str| -> Result<u32> { get(k)?.parse().map_err(|_| err(ln, format!("bad `{k}`"))) };
                let range = |k: &str| -> Result<(u32, u32)> {
                    let s = get(k)?;
                    let (a, b) = s
                        .split_once('+')
                        .ok_or_else(|| err(ln, format!("`{k}` must be start+count")))?;
                    Ok((
                        a.parse().map_err(|_| err(ln, format!("bad `{k}` start")))?,
                        b.parse().map_err(|_| err(ln, format!("bad `{k}` count")))?,
                    ))
                };
                let (ks, kn) = range("keys")?;
                let (vs, vn) = range("values")?;
                vocab = Some(Vocabulary {
                    grammar: grammar.ok_or_else(|| err(ln, "`vocab` must follow `grammar`".into()))?,
                    bos: num("bos")?,
                    is: num("is")?,
                    single_hop: num("q1")?,
                    two_hop: num("q2")?,
                    key_start: ks,
                    n_keys: kn,
                    value_start: vs,
                    n_values: vn,
                });
            }
            "fact" => {
                if rest.len() != 2 {
                    return Err(err(ln, "fact needs a key and a value".into()));
                }
                let k: TokenId = rest[0].parse().map_err(|_| err(ln, format!("bad key `{}`", rest[0])))?;
                let v: TokenId = rest[1]
                    .parse()
                    .map_err(|_| err(ln, format!("bad value `{}`", rest[1])))?;
                if facts.insert(k, v).is_some() {
                    return Err(err(ln, format!("duplicate fact for key {k}")));
                }
            }
            "question" => {
                let f = fields(&rest).map_err(|m| err(ln, m))?;
                let get =
                    |k: &str| -> Result<&str> { f.get(k).copied().ok_or_else(|| err(ln, format!("missing `{k}`"))) };
                let list = |k: &str| -> Result<Vec<TokenId>> {
                    get(k)?
                        .split(',')
                        .map(|w| w.parse().map_err(|_| err(ln, format!("bad token in `{k}`"))))
                        .collect()
                };
                let split = match get("split")? {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    other => return Err(err(ln, format!("unknown split `{other}`"))),
                };
                questions.push(Question {
                    id: get("id")?.parse().map_err(|_| err(ln, "bad `id`".into()))?,
                    split,
                    hops: get("hops")?.parse().map_err(|_| err(ln, "bad `hops`".into()))?,
                    surface: list("surface")?,
                    gold_answer: list("answer")?,
                    gold_chain: list("chain")?,
                });
            }
            other => return Err(err(ln, format!("unknown record `{other}`"))),
        }
    }
    if !seen_header {
        return Err(err(1, "empty corpus file".into()));
    }
    let vocab = vocab.ok_or_else(|| err(0, "missing `vocab` line".into()))?;
    Corpus::from_parts(vocab, facts, questions).map_err(|e| err(0, e.to_string()))
}

fn fields<'a>(words: &[&'a str]) -> std::result::Result<BTreeMap<&'a str, &'a str>, String> {
    words
        .iter()
        .map(|w| {
            w.split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{w}`"))
        })
        .collect()
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, corpus_to_string(corpus))?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    parse_corpus(&fs::read_to_string(path)?, path)
}

pub fn write_records(records: &[EpisodeRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EpisodeRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolenv::CorpusSpec;

    #[test]
    fn corpus_text_round_trip() {
        let c = Corpus::generate(&CorpusSpec::default()).unwrap();
        let text = corpus_to_string(&c);
        let back = parse_corpus(&text, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(corpus_to_string(&back), text);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "dartlab-corpus 1\ngrammar 1 2 3 4 5 6 7 8\nvocab bos=0 is=9 q1=10 q2=11 keys=12+4 values=16+4\nfact 12 x\n";
        match parse_corpus(text, Path::new("c.txt")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("bad value"));
            }
            other => panic!("{other:?}"),
        }
        let bad_header = "corpus 1\n";
        assert!(matches!(
            parse_corpus(bad_header, Path::new("c")),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
