//! Lenient XML tokenizer for text that may not be well-formed.
//!
//! Unlike the strict parser behind [`crate::codec`], this never fails: it
//! splits input into tags, text and markup declarations with byte ranges,
//! tolerating bare `&`/`<`, mismatched tags and truncation. The repair passes,
//! the XML extractor and the streaming completion detector all run on it.

use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attr {
    pub name: String,
    /// The whole `name="value"` span.
    pub range: Range<usize>,
    /// Raw (still escaped) value span, quotes excluded.
    pub value: Range<usize>,
    pub quoted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    StartTag {
        name: String,
        attrs: Vec<Attr>,
        self_closing: bool,
    },
    EndTag {
        name: String,
    },
    /// Comment, processing instruction, CDATA section or DOCTYPE.
    Markup,
    /// Construct cut off by the end of input.
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub range: Range<usize>,
}

impl Token {
    pub fn start_name(&self) -> Option<&str> {
        match &self.kind {
            TokenKind::StartTag { name, .. } => Some(name),
            _ => None,
        }
    }

    pub fn attr<'a>(&self, src: &'a str, name: &str) -> Option<&'a str> {
        match &self.kind {
            TokenKind::StartTag { attrs, .. } => attrs.iter().find(|a| a.name == name).map(|a| &src[a.value.clone()]),
            _ => None,
        }
    }
}

fn is_name_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_' || c == b':' || c >= 0x80
}

fn is_name_char(c: u8) -> bool {
    is_name_start(c) || c.is_ascii_digit() || c == b'-' || c == b'.'
}

/// Whether a `<` at `pos` opens markup (as opposed to being a bare character).
/// `None` when the input ends before that can be decided.
pub fn opens_markup(src: &str, pos: usize) -> Option<bool> {
    let next = *src.as_bytes().get(pos + 1)?;
    Some(is_name_start(next) || next == b'/' || next == b'!' || next == b'?')
}

pub struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    pub fn new(src: &'a str) -> Self {
        Self { src, pos: 0 }
    }

    pub fn starting_at(src: &'a str, pos: usize) -> Self {
        Self { src, pos }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn bytes(&self) -> &'a [u8] {
        self.src.as_bytes()
    }

    fn text(&mut self) -> Token {
        let start = self.pos;
        let b = self.bytes();
        let mut i = start;
        while i < b.len() {
            if b[i] == b'<' && opens_markup(self.src, i) != Some(false) {
                break;
            }
            i += 1;
        }
        self.pos = i;
        Token {
            kind: TokenKind::Text,
            range: start..i,
        }
    }

    fn incomplete(&mut self, start: usize) -> Token {
        self.pos = self.src.len();
        Token {
            kind: TokenKind::Incomplete,
            range: start..self.src.len(),
        }
    }

    fn name_at(&self, mut i: usize) -> usize {
        let b = self.bytes();
        while i < b.len() && is_name_char(b[i]) {
            i += 1;
        }
        i
    }

    fn skip_ws(&self, mut i: usize) -> usize {
        let b = self.bytes();
        while i < b.len() && b[i].is_ascii_whitespace() {
            i += 1;
        }
        i
    }

    fn end_tag(&mut self, start: usize) -> Token {
        let name_start = start + 2;
        let name_end = self.name_at(name_start);
        match self.src[name_end..].find('>') {
            Some(off) => {
                let end = name_end + off + 1;
                self.pos = end;
                Token {
                    kind: TokenKind::EndTag {
                        name: self.src[name_start..name_end].to_string(),
                    },
                    range: start..end,
                }
            }
            None => self.incomplete(start),
        }
    }

    fn start_tag(&mut self, start: usize) -> Token {
        let b = self.bytes();
        let name_end = self.name_at(start + 1);
        let name = self.src[start + 1..name_end].to_string();
        let mut attrs = Vec::new();
        let mut i = name_end;
        loop {
            i = self.skip_ws(i);
            if i >= b.len() {
                return self.incomplete(start);
            }
            match b[i] {
                b'>' => {
                    self.pos = i + 1;
                    return Token {
                        kind: TokenKind::StartTag {
                            name,
                            attrs,
                            self_closing: false,
                        },
                        range: start..i + 1,
                    };
                }
                b'/' if b.get(i + 1) == Some(&b'>') => {
                    self.pos = i + 2;
                    return Token {
                        kind: TokenKind::StartTag {
                            name,
                            attrs,
                            self_closing: true,
                        },
                        range: start..i + 2,
                    };
                }
                b'/' => {
                    if i + 1 >= b.len() {
                        return self.incomplete(start);
                    }
                    i += 1;
                }
                _ => {
                    let attr_start = i;
                    let mut name_end = self.name_at(i);
                    if name_end == i {
                        // Stray character inside a tag; step over it.
                        name_end = i + utf8_len(b[i]);
                    }
                    let attr_name = self.src[attr_start..name_end].to_string();
                    let j = self.skip_ws(name_end);
                    if j >= b.len() {
                        return self.incomplete(start);
                    }
                    if b[j] != b'=' {
                        attrs.push(Attr {
                            name: attr_name,
                            range: attr_start..name_end,
                            value: name_end..name_end,
                            quoted: false,
                        });
                        i = name_end;
                        continue;
                    }
                    let k = self.skip_ws(j + 1);
                    if k >= b.len() {
                        return self.incomplete(start);
                    }
                    if b[k] == b'"' || b[k] == b'\'' {
                        let Some(off) = self.src[k + 1..].find(b[k] as char) else {
                            return self.incomplete(start);
                        };
                        let close = k + 1 + off;
                        attrs.push(Attr {
                            name: attr_name,
                            range: attr_start..close + 1,
                            value: k + 1..close,
                            quoted: true,
                        });
                        i = close + 1;
                    } else {
                        let mut e = k;
                        while e < b.len() && !b[e].is_ascii_whitespace() && b[e] != b'>' && !(b[e] == b'/' && b.get(e + 1) == Some(&b'>')) {
                            e += 1;
                        }
                        attrs.push(Attr {
                            name: attr_name,
                            range: attr_start..e,
                            value: k..e,
                            quoted: false,
                        });
                        i = e;
                    }
                }
            }
        }
    }
}

fn utf8_len(first: u8) -> usize {
    match first {
        0xF0..=0xFF => 4,
        0xE0..=0xEF => 3,
        0xC0..=0xDF => 2,
        _ => 1,
    }
}

impl Iterator for Lexer<'_> {
    type Item = Token;

    fn next(&mut self) -> Option<Token> {
        let b = self.bytes();
        let start = self.pos;
        if start >= b.len() {
            return None;
        }
        if b[start] != b'<' {
            return Some(self.text());
        }
        match opens_markup(self.src, start) {
            None => Some(self.incomplete(start)),
            Some(false) => Some(self.text()),
            Some(true) => {
                let rest = &self.src[start..];
                if rest.starts_with("<!--") {
                    Some(self.delimited_after(start, 4, "-->"))
                } else if rest.starts_with("<![CDATA[") {
                    Some(self.delimited_after(start, 9, "]]>"))
                } else if rest.starts_with("<?") {
                    Some(self.delimited_after(start, 2, "?>"))
                } else if rest.starts_with("<!") {
                    if "<!--".starts_with(rest) || "<![CDATA[".starts_with(rest) {
                        return Some(self.incomplete(start));
                    }
                    Some(self.delimited_after(start, 2, ">"))
                } else if rest.starts_with("</") {
                    Some(self.end_tag(start))
                } else {
                    Some(self.start_tag(start))
                }
            }
        }
    }
}

impl Lexer<'_> {
    fn delimited_after(&mut self, start: usize, prefix: usize, terminator: &str) -> Token {
        let body = start + prefix;
        if body > self.src.len() {
            return self.incomplete(start);
        }
        match self.src[body..].find(terminator) {
            Some(off) => {
                let end = body + off + terminator.len();
                self.pos = end;
                Token {
                    kind: TokenKind::Markup,
                    range: start..end,
                }
            }
            None => self.incomplete(start),
        }
    }
}

pub fn tokenize(src: &str) -> Vec<Token> {
    Lexer::new(src).collect()
}

/// Whether `&` at `pos` begins one of the five predefined entities or a
/// character reference.
pub fn is_entity_at(src: &str, pos: usize) -> bool {
    let rest = &src[pos + 1..];
    let Some(semi) = rest.find(';') else { return false };
    let body = &rest[..semi];
    match body.as_bytes() {
        b"amp" | b"lt" | b"gt" | b"quot" | b"apos" => true,
        [b'#', b'x', hex @ ..] if !hex.is_empty() => hex.iter().all(u8::is_ascii_hexdigit),
        [b'#', dec @ ..] if !dec.is_empty() => dec.iter().all(u8::is_ascii_digit),
        _ => false,
    }
}

const ROOT_NAMES: [&str; 2] = ["mxfile", "mxGraphModel"];

/// Finds the start of the first `<mxfile` or `<mxGraphModel` element at or
/// after `from`. `Err(pos)` means a candidate at `pos` cannot be confirmed
/// until more input arrives (only when `at_eof` is false).
pub fn find_root_start(src: &str, from: usize, at_eof: bool) -> Result<Option<usize>, usize> {
    let mut search = from;
    while let Some(off) = src[search..].find('<') {
        let pos = search + off;
        let rest = &src[pos + 1..];
        for name in ROOT_NAMES {
            if rest.starts_with(name) {
                match rest.as_bytes().get(name.len()) {
                    None if !at_eof => return Err(pos),
                    None => return Ok(Some(pos)),
                    Some(c) if c.is_ascii_whitespace() || *c == b'>' || *c == b'/' => return Ok(Some(pos)),
                    Some(_) => {}
                }
            } else if !at_eof && name.starts_with(rest) {
                return Err(pos);
            }
        }
        search = pos + 1;
    }
    Ok(None)
}

/// Incremental element-depth tracker for the XML region that starts at a
/// root element. Feeding it successive prefixes of the same growing buffer
/// yields the same end position as scanning the final buffer once.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionScanner {
    pub start: Option<usize>,
    /// Byte offset scanned up to; tokens are consumed only when complete.
    pos: usize,
    pub depth: usize,
    /// End offset (exclusive) of the close tag that returned depth to 0.
    pub end: Option<usize>,
}

impl RegionScanner {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root_seen(&self) -> bool {
        self.start.is_some()
    }

    /// Advances over `buf`, which must extend the buffer seen by previous calls.
    pub fn advance(&mut self, buf: &str, at_eof: bool) {
        if self.end.is_some() {
            return;
        }
        if self.start.is_none() {
            match find_root_start(buf, self.pos, at_eof) {
                Ok(Some(s)) => {
                    self.start = Some(s);
                    self.pos = s;
                }
                Ok(None) => {
                    // Keep a tail so a root tag split across chunks is still found.
                    self.pos = buf.len().saturating_sub(1);
                    while !buf.is_char_boundary(self.pos) {
                        self.pos -= 1;
                    }
                    return;
                }
                Err(p) => {
                    self.pos = p;
                    return;
                }
            }
        }
        let mut lexer = Lexer::starting_at(buf, self.pos);
        while let Some(tok) = lexer.next() {
            match &tok.kind {
                TokenKind::Incomplete => return,
                // Text at the very end of a live buffer may be followed by a
                // `<` that changes nothing, so consuming it is safe.
                TokenKind::Text | TokenKind::Markup => {}
                TokenKind::StartTag { self_closing, .. } => {
                    if *self_closing {
                        if self.depth == 0 {
                            self.end = Some(tok.range.end);
                            self.pos = tok.range.end;
                            return;
                        }
                    } else {
                        self.depth += 1;
                    }
                }
                TokenKind::EndTag { .. } => {
                    if self.depth > 0 {
                        self.depth -= 1;
                        if self.depth == 0 {
                            self.end = Some(tok.range.end);
                            self.pos = tok.range.end;
                            return;
                        }
                    }
                }
            }
            self.pos = lexer.position();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kinds(src: &str) -> Vec<String> {
        tokenize(src)
            .into_iter()
            .map(|t| match t.kind {
                TokenKind::Text => format!("T({})", &src[t.range]),
                TokenKind::StartTag { name, self_closing, .. } => format!("S({name}{})", if self_closing { "/" } else { "" }),
                TokenKind::EndTag { name } => format!("E({name})"),
                TokenKind::Markup => "M".into(),
                TokenKind::Incomplete => "I".into(),
            })
            .collect()
    }

    #[test]
    fn basic_tokens() {
        assert_eq!(
            kinds(r#"<a x="1"><!-- c --><b/>hi</a>"#),
            ["S(a)", "M", "S(b/)", "T(hi)", "E(a)"]
        );
    }

    #[test]
    fn bare_lt_is_text() {
        assert_eq!(kinds("<a>1 < 2</a>"), ["S(a)", "T(1 < 2)", "E(a)"]);
    }

    #[test]
    fn quoted_values_hide_markup() {
        let src = r#"<mxCell value="<b>x</b> > y" id='2'/>"#;
        let toks = tokenize(src);
        assert_eq!(toks.len(), 1);
        assert_eq!(toks[0].attr(src, "value"), Some("<b>x</b> > y"));
        assert_eq!(toks[0].attr(src, "id"), Some("2"));
    }

    #[test]
    fn truncation_is_incomplete() {
        assert_eq!(kinds("<a><b x=\"1"), ["S(a)", "I"]);
        assert_eq!(kinds("<a><!-- open"), ["S(a)", "I"]);
        assert_eq!(kinds("<a><"), ["S(a)", "I"]);
        assert_eq!(kinds("<a></a"), ["S(a)", "I"]);
    }

    #[test]
    fn entity_detection() {
        let s = "&amp; &#38; &#x26; &nbsp; & &#; &#xZ;";
        let found: Vec<bool> = s.match_indices('&').map(|(i, _)| is_entity_at(s, i)).collect();
        assert_eq!(found, [true, true, true, false, false, false, false]);
    }

    #[test]
    fn root_start_detection() {
        assert_eq!(find_root_start("hi <mxfile>", 0, true), Ok(Some(3)));
        assert_eq!(find_root_start("<mxfileX><mxGraphModel a>", 0, true), Ok(Some(9)));
        assert_eq!(find_root_start("text <mxGr", 0, false), Err(5));
        assert_eq!(find_root_start("text <mxfile", 0, false), Err(5));
        assert_eq!(find_root_start("no xml", 0, true), Ok(None));
    }

    #[test]
    fn region_end_on_whole_text() {
        let src = "Here:\n<mxfile><diagram><!-- </mxfile> --></diagram></mxfile>\ntrailing";
        let mut sc = RegionScanner::new();
        sc.advance(src, true);
        assert_eq!(sc.start, Some(6));
        assert_eq!(&src[sc.end.unwrap() - 9..sc.end.unwrap()], "</mxfile>");
        assert_eq!(&src[sc.end.unwrap()..], "\ntrailing");
    }

    proptest! {
        #[test]
        fn lexer_covers_input_without_gaps(s in "[<>/=\"'a-z &;!?\\[\\]-]{0,80}") {
            let mut expected = 0;
            for tok in tokenize(&s) {
                prop_assert_eq!(tok.range.start, expected);
                prop_assert!(tok.range.end > tok.range.start);
                expected = tok.range.end;
            }
            prop_assert_eq!(expected, s.len());
        }

        #[test]
        fn region_scan_is_chunking_invariant(
            body in "[<>/=\"a-z ]{0,60}",
            split in proptest::collection::vec(1usize..7, 1..30),
        ) {
            let src = format!("pre <mxfile><diagram>{body}</diagram></mxfile> post");
            let mut whole = RegionScanner::new();
            whole.advance(&src, true);

            let mut inc = RegionScanner::new();
            let mut cut = 0;
            let mut sizes = split.iter().cycle();
            while cut < src.len() {
                cut = (cut + sizes.next().unwrap()).min(src.len());
                while !src.is_char_boundary(cut) { cut += 1; }
                inc.advance(&src[..cut], cut == src.len());
            }
            prop_assert_eq!(inc.start, whole.start);
            prop_assert_eq!(inc.end, whole.end);
        }
    }
}
