use super::{SceneGraph, PALETTE_LEN, SIZE_BUCKETS, SLOT_COUNT};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Addition,
    Removal,
    Texture,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Addition, Category::Removal, Category::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Category::Addition => "addition",
            Category::Removal => "removal",
            Category::Texture => "texture",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// A structured edit command.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EditInstruction {
    /// Add the canonical primitive for `slot` with the given size bucket and color.
    Addition { slot: u8, size: u8, color: u8 },
    Removal { slot: u8 },
    /// Recolor the part in `slot`.
    Texture { slot: u8, color: u8 },
}

impl EditInstruction {
    pub fn category(&self) -> Category {
        match self {
            EditInstruction::Addition { .. } => Category::Addition,
            EditInstruction::Removal { .. } => Category::Removal,
            EditInstruction::Texture { .. } => Category::Texture,
        }
    }

    pub fn slot(&self) -> u8 {
        match *self {
            EditInstruction::Addition { slot, .. }
            | EditInstruction::Removal { slot }
            | EditInstruction::Texture { slot, .. } => slot,
        }
    }

    pub fn validate_for(&self, scene: &SceneGraph) -> Result<()> {
        let slot = self.slot();
        let present = scene.has_slot(slot);
        match self {
            EditInstruction::Addition { .. } if present => Err(Error::InvalidInstruction(format!(
                "addition needs a free slot, {slot} is taken"
            ))),
            EditInstruction::Removal { .. } | EditInstruction::Texture { .. } if !present => Err(
                Error::InvalidInstruction(format!("target slot {slot} is not in the scene")),
            ),
            _ => Ok(()),
        }
    }

    /// Human-readable form, e.g. `texture:slot=1:color=3`.
    pub fn to_spec(&self) -> String {
        match *self {
            EditInstruction::Addition { slot, size, color } => {
                format!("addition:slot={slot}:size={size}:color={color}")
            }
            EditInstruction::Removal { slot } => format!("removal:slot={slot}"),
            EditInstruction::Texture { slot, color } => format!("texture:slot={slot}:color={color}"),
        }
    }

    pub fn parse_spec(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let cat = parts
            .next()
            .and_then(Category::parse)
            .ok_or_else(|| Error::Config(format!("bad instruction '{s}'")))?;
        let (mut slot, mut size, mut color) = (None, None, None);
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad instruction field '{kv}'")))?;
            let v: u8 = v.parse().map_err(|_| Error::Config(format!("bad number in '{kv}'")))?;
            match k {
                "slot" => slot = Some(v),
                "size" => size = Some(v),
                "color" => color = Some(v),
                _ => return Err(Error::Config(format!("unknown instruction field '{k}'"))),
            }
        }
        let need = |o: Option<u8>, what: &str| o.ok_or_else(|| Error::Config(format!("instruction needs {what}")));
        Ok(match cat {
            Category::Addition => EditInstruction::Addition {
                slot: need(slot, "slot")?,
                size: need(size, "size")?,
                color: need(color, "color")?,
            },
            Category::Removal => EditInstruction::Removal { slot: need(slot, "slot")? },
            Category::Texture => EditInstruction::Texture {
                slot: need(slot, "slot")?,
                color: need(color, "color")?,
            },
        })
    }
}

/// Four instruction tokens: category, target slot, attribute a, attribute b.
pub type InstrTokens = [u16; 4];

/// Reserved encoding of "no instruction".
pub const NULL_TOKENS: InstrTokens = [0; 4];

pub const VOCAB_SIZE: usize = 32;

const TOK_ADDITION: u16 = 1;
const TOK_REMOVAL: u16 = 2;
const TOK_TEXTURE: u16 = 3;
const TOK_EMPTY: u16 = 4;
const SLOT_BASE: u16 = 8;
const COLOR_BASE: u16 = 16;
const SIZE_BASE: u16 = 24;

pub fn encode_instruction(instr: &EditInstruction) -> Result<InstrTokens> {
    let slot = instr.slot();
    let check = |v: u8, max: u8, what: &str| {
        if v >= max {
            Err(Error::Encoding(format!("{what} {v} outside vocabulary (max {})", max - 1)))
        } else {
            Ok(u16::from(v))
        }
    };
    let s = SLOT_BASE + check(slot, SLOT_COUNT, "slot")?;
    Ok(match *instr {
        EditInstruction::Addition { size, color, .. } => [
            TOK_ADDITION,
            s,
            COLOR_BASE + check(color, PALETTE_LEN, "color")?,
            SIZE_BASE + check(size, SIZE_BUCKETS, "size")?,
        ],
        EditInstruction::Removal { .. } => [TOK_REMOVAL, s, TOK_EMPTY, TOK_EMPTY],
        EditInstruction::Texture { color, .. } => [
            TOK_TEXTURE,
            s,
            COLOR_BASE + check(color, PALETTE_LEN, "color")?,
            TOK_EMPTY,
        ],
    })
}

/// Inverse of [`encode_instruction`]; `Ok(None)` for the NULL sequence.
pub fn decode_instruction(tokens: &InstrTokens) -> Result<Option<EditInstruction>> {
    if *tokens == NULL_TOKENS {
        return Ok(None);
    }
    let bad = || Error::Encoding(format!("not an instruction encoding: {tokens:?}"));
    let field = |t: u16, base: u16, max: u8| -> Result<u8> {
        if t >= base && t < base + u16::from(max) {
            Ok((t - base) as u8)
        } else {
            Err(bad())
        }
    };
    let slot = field(tokens[1], SLOT_BASE, SLOT_COUNT)?;
    match tokens[0] {
        TOK_ADDITION => Ok(Some(EditInstruction::Addition {
            slot,
            color: field(tokens[2], COLOR_BASE, PALETTE_LEN)?,
            size: field(tokens[3], SIZE_BASE, SIZE_BUCKETS)?,
        })),
        TOK_REMOVAL if tokens[2] == TOK_EMPTY && tokens[3] == TOK_EMPTY => {
            Ok(Some(EditInstruction::Removal { slot }))
        }
        TOK_TEXTURE if tokens[3] == TOK_EMPTY => Ok(Some(EditInstruction::Texture {
            slot,
            color: field(tokens[2], COLOR_BASE, PALETTE_LEN)?,
        })),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;
    use std::collections::HashMap;

    fn random_instr(rng: &mut impl Rng) -> EditInstruction {
        let slot = rng.random_range(0..SLOT_COUNT);
        match rng.random_range(0..3) {
            0 => EditInstruction::Addition {
                slot,
                size: rng.random_range(0..SIZE_BUCKETS),
                color: rng.random_range(0..PALETTE_LEN),
            },
            1 => EditInstruction::Removal { slot },
            _ => EditInstruction::Texture {
                slot,
                color: rng.random_range(0..PALETTE_LEN),
            },
        }
    }

    #[test]
    fn round_trip_random_instructions() {
        let mut rng = rng_from(11);
        for _ in 0..1000 {
            let i = random_instr(&mut rng);
            let t = encode_instruction(&i).unwrap();
            assert!(t.iter().all(|&v| (v as usize) < VOCAB_SIZE));
            assert_eq!(decode_instruction(&t).unwrap(), Some(i));
        }
    }

    #[test]
    fn encoding_is_injective_over_the_whole_space() {
        let mut seen = HashMap::new();
        for slot in 0..SLOT_COUNT {
            let mut all = vec![EditInstruction::Removal { slot }];
            for color in 0..PALETTE_LEN {
                all.push(EditInstruction::Texture { slot, color });
                for size in 0..SIZE_BUCKETS {
                    all.push(EditInstruction::Addition { slot, size, color });
                }
            }
            for i in all {
                let t = encode_instruction(&i).unwrap();
                assert_ne!(t, NULL_TOKENS);
                assert!(seen.insert(t, i).is_none(), "collision for {i:?}");
            }
        }
    }

    #[test]
    fn null_is_all_zero() {
        assert_eq!(NULL_TOKENS, [0, 0, 0, 0]);
        assert_eq!(decode_instruction(&NULL_TOKENS).unwrap(), None);
    }

    #[test]
    fn out_of_range_attribute_fails() {
        let err = encode_instruction(&EditInstruction::Texture { slot: 1, color: 9 }).unwrap_err();
        assert!(matches!(err, Error::Encoding(_)));
        assert!(encode_instruction(&EditInstruction::Removal { slot: 6 }).is_err());
    }

    #[test]
    fn spec_strings_round_trip() {
        let i = EditInstruction::Addition { slot: 3, size: 1, color: 7 };
        assert_eq!(EditInstruction::parse_spec(&i.to_spec()).unwrap(), i);
        assert!(EditInstruction::parse_spec("texture:slot=1").is_err());
    }
}
