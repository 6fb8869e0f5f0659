//! Tolerant HTML scanning: link extraction, content fingerprints and the
//! topical relevance score used to prioritize discovered links.
//!
//! There is no DOM. A single forward scan recognizes comments, tags with
//! their attributes, and text runs; anything it cannot make sense of is
//! treated as text. Unclosed tags, unbalanced quotes and stray `<` never
//! abort the scan.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::urlkit::{resolve, CanonicalUrl};

/// SHA-256 of the exact body bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

impl FromStr for Fingerprint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("not a 64-hex digest: {s:?}"));
        }
        let mut out = [0u8; 32];
        for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
            let hex = std::str::from_utf8(chunk).expect("ascii");
            out[i] = u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?;
        }
        Ok(Fingerprint(out))
    }
}

pub fn fingerprint(body: &[u8]) -> Fingerprint {
    Fingerprint(Sha256::digest(body).into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageAnalysis {
    pub links: Vec<CanonicalUrl>,
    pub fingerprint: Fingerprint,
    pub relevance: f64,
    pub token_count: usize,
}

pub fn analyze(body: &[u8], base: &CanonicalUrl, topic: &[String]) -> PageAnalysis {
    let text = String::from_utf8_lossy(body);
    let tokens = tokenize(&visible_text(&text));
    PageAnalysis {
        links: links_in(&text, base),
        fingerprint: fingerprint(body),
        relevance: score_tokens(&tokens, topic),
        token_count: tokens.len(),
    }
}

/// Every recoverable `<a href>` in document order, resolved and
/// canonicalized, first occurrence kept. A `<base href>` seen before the
/// first anchor replaces `base`.
pub fn extract_links(body: &[u8], base: &CanonicalUrl) -> Vec<CanonicalUrl> {
    links_in(&String::from_utf8_lossy(body), base)
}

fn links_in(text: &str, base: &CanonicalUrl) -> Vec<CanonicalUrl> {
    let mut effective_base = base.clone();
    let mut seen_anchor = false;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for token in Scanner::new(text) {
        let Token::Tag(tag) = token else { continue };
        if tag.closing {
            continue;
        }
        match tag.name.as_str() {
            "base" if !seen_anchor => {
                if let Some(href) = tag.attr("href") {
                    if let Ok(b) = resolve(base, &decode_entities(href)) {
                        effective_base = b;
                    }
                }
            }
            "a" => {
                seen_anchor = true;
                if let Some(href) = tag.attr("href") {
                    if let Ok(u) = resolve(&effective_base, &decode_entities(href)) {
                        if seen.insert(u.clone()) {
                            out.push(u);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

/// Distinct-term hit ratio: the fraction of `topic` terms that occur as a
/// token of the page text. An empty topic scores 1.
pub fn relevance_score(body: &[u8], topic: &[String]) -> f64 {
    let text = String::from_utf8_lossy(body);
    score_tokens(&tokenize(&visible_text(&text)), topic)
}

fn score_tokens(tokens: &[String], topic: &[String]) -> f64 {
    let terms: HashSet<String> = topic.iter().map(|t| t.to_lowercase()).collect();
    if terms.is_empty() {
        return 1.0;
    }
    let present: HashSet<&str> = tokens.iter().map(String::as_str).collect();
    let hits = terms.iter().filter(|t| present.contains(t.as_str())).count();
    hits as f64 / terms.len() as f64
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Text content with tags, comments, and script/style bodies removed.
pub fn visible_text(html: &str) -> String {
    let mut out = String::with_capacity(html.len() / 2);
    for token in Scanner::new(html) {
        if let Token::Text(t) = token {
            out.push_str(&decode_entities(t));
            out.push(' ');
        }
    }
    out
}

fn decode_entities(s: &str) -> String {
    if !s.contains('&') {
        return s.to_string();
    }
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('&') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let decoded = rest[1..].find(';').filter(|&end| end <= 10).and_then(|end| {
            let name = &rest[1..1 + end];
            let ch = match name {
                "amp" => Some('&'),
                "lt" => Some('<'),
                "gt" => Some('>'),
                "quot" => Some('"'),
                "apos" => Some('\''),
                "nbsp" => Some(' '),
                _ => {
                    let num = name.strip_prefix('#')?;
                    let code = match num.strip_prefix(['x', 'X']) {
                        Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                        None => num.parse().ok()?,
                    };
                    char::from_u32(code)
                }
            }?;
            Some((ch, end + 2))
        });
        match decoded {
            Some((ch, len)) => {
                out.push(ch);
                rest = &rest[len..];
            }
            None => {
                out.push('&');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug)]
struct Tag<'a> {
    name: String,
    closing: bool,
    attrs: Vec<(String, &'a str)>,
}

impl Tag<'_> {
    fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug)]
enum Token<'a> {
    Text(&'a str),
    Tag(Tag<'a>),
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
    /// Set after `<script>`/`<style>`: skip raw text up to the closing tag.
    raw_until: Option<&'static str>,
}

impl<'a> Scanner<'a> {
    fn new(src: &'a str) -> Self {
        Scanner {
            src,
            pos: 0,
            raw_until: None,
        }
    }

    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn find_ci(&self, needle: &str, from: usize) -> Option<usize> {
        let hay = self.bytes();
        let n = needle.as_bytes();
        (from..hay.len().saturating_sub(n.len() - 1))
            .find(|&i| hay[i..i + n.len()].eq_ignore_ascii_case(n))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.bytes()[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Reads a tag starting just after `<`. Stops at `>`, at a `<` that is
    /// not inside quotes, or at end of input.
    fn read_tag(&mut self) -> Option<Tag<'a>> {
        let b = self.bytes();
        let mut closing = false;
        if self.pos < b.len() && b[self.pos] == b'/' {
            closing = true;
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < b.len() && (b[self.pos].is_ascii_alphanumeric() || b[self.pos] == b'-') {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        let name = self.src[start..self.pos].to_ascii_lowercase();
        let mut attrs = Vec::new();
        loop {
            self.skip_ws();
            if self.pos >= b.len() {
                break;
            }
            match b[self.pos] {
                b'>' => {
                    self.pos += 1;
                    break;
                }
                b'<' => break,
                b'/' => {
                    self.pos += 1;
                    continue;
                }
                _ => {}
            }
            let key_start = self.pos;
            while self.pos < b.len()
                && !b[self.pos].is_ascii_whitespace()
                && !matches!(b[self.pos], b'=' | b'>' | b'<' | b'/')
            {
                self.pos += 1;
            }
            let key = self.src[key_start..self.pos].to_ascii_lowercase();
            if key.is_empty() {
                // Lone `=` or similar junk.
                self.pos += 1;
                continue;
            }
            self.skip_ws();
            let mut value = "";
            if self.pos < b.len() && b[self.pos] == b'=' {
                self.pos += 1;
                self.skip_ws();
                value = self.read_value();
            }
            attrs.push((key, value));
        }
        Some(Tag {
            name,
            closing,
            attrs,
        })
    }

    fn read_value(&mut self) -> &'a str {
        let b = self.bytes();
        if self.pos >= b.len() {
            return "";
        }
        let quote = b[self.pos];
        if quote == b'"' || quote == b'\'' {
            let start = self.pos + 1;
            if let Some(off) = b[start..].iter().position(|&c| c == quote) {
                self.pos = start + off + 1;
                return &self.src[start..start + off];
            }
            // Unbalanced quote: take up to the next whitespace or `>`.
            self.pos = start;
        }
        let start = self.pos;
        while self.pos < b.len() && !b[self.pos].is_ascii_whitespace() && !matches!(b[self.pos], b'>' | b'<') {
            self.pos += 1;
        }
        &self.src[start..self.pos]
    }
}

impl<'a> Iterator for Scanner<'a> {
    type Item = Token<'a>;

    fn next(&mut self) -> Option<Token<'a>> {
        let len = self.src.len();
        while self.pos < len {
            if let Some(end_tag) = self.raw_until.take() {
                // Raw text is dropped, not emitted.
                self.pos = self.find_ci(end_tag, self.pos).unwrap_or(len);
                continue;
            }
            let b = self.bytes();
            if b[self.pos] == b'<' {
                if self.src[self.pos..].starts_with("<!--") {
                    self.pos = match self.src[self.pos + 4..].find("-->") {
                        Some(off) => self.pos + 4 + off + 3,
                        None => len,
                    };
                    continue;
                }
                if matches!(b.get(self.pos + 1), Some(b'!') | Some(b'?')) {
                    // Doctype or processing instruction.
                    self.pos = self.src[self.pos..].find('>').map_or(len, |o| self.pos + o + 1);
                    continue;
                }
                let save = self.pos;
                self.pos += 1;
                match self.read_tag() {
                    Some(tag) => {
                        if !tag.closing {
                            match tag.name.as_str() {
                                "script" => self.raw_until = Some("</script"),
                                "style" => self.raw_until = Some("</style"),
                                _ => {}
                            }
                        }
                        return Some(Token::Tag(tag));
                    }
                    None => {
                        // A bare `<` is text.
                        self.pos = save + 1;
                        return Some(Token::Text(&self.src[save..save + 1]));
                    }
                }
            }
            let start = self.pos;
            let end = self.src[start..].find('<').map_or(len, |o| start + o);
            self.pos = end;
            return Some(Token::Text(&self.src[start..end]));
        }
        None
    }
}
