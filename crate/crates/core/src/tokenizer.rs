//! Byte-level tokenizer: ids 0..=255 are raw bytes, followed by four specials.

pub type Token = u32;

pub const PAD: Token = 256;
pub const BOS: Token = 257;
pub const EOS: Token = 258;
/// Marks planner subtasks; its embedding seeds the planner's indicator rows.
pub const IND: Token = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<Token> {
    text.bytes().map(Token::from).collect()
}

/// Decodes byte tokens, dropping specials.
pub fn decode(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Human-readable rendering that keeps specials visible.
pub fn render(tokens: &[Token]) -> String {
    let mut s = String::new();
    for &t in tokens {
        match t {
            PAD => s.push_str("<pad>"),
            BOS => s.push_str("<bos>"),
            EOS => s.push_str("<eos>"),
            IND => s.push_str("<ind>"),
            b if b < 256 && (b as u8).is_ascii_graphic() || b == 32 => s.push(b as u8 as char),
            b => s.push_str(&format!("<{b:#04x}>")),
        }
    }
    s
}
