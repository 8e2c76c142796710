use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    System,
    Image,
    Instruction,
}

/// A role-tagged prompt: `tokens`, `roles` and `positions` are parallel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<u32>,
    roles: Vec<TokenRole>,
    positions: Vec<usize>,
}

impl TokenSequence {
    pub fn new(
        tokens: Vec<u32>,
        roles: Vec<TokenRole>,
        positions: Vec<usize>,
    ) -> Result<Self, RuntimeError> {
        if tokens.is_empty() {
            return Err(RuntimeError::InvalidSequence("sequence is empty".into()));
        }
        if roles.len() != tokens.len() || positions.len() != tokens.len() {
            return Err(RuntimeError::InvalidSequence(format!(
                "length mismatch: {} tokens, {} roles, {} positions",
                tokens.len(),
                roles.len(),
                positions.len()
            )));
        }
        check_layout(&roles)?;
        Ok(Self {
            tokens,
            roles,
            positions,
        })
    }

    /// `system ++ image ++ instruction` with positions `0..n`.
    pub fn llava_layout(
        system: &[u32],
        image: &[u32],
        instruction: &[u32],
    ) -> Result<Self, RuntimeError> {
        let mut tokens = Vec::with_capacity(system.len() + image.len() + instruction.len());
        let mut roles = Vec::with_capacity(tokens.capacity());
        for (ids, role) in [
            (system, TokenRole::System),
            (image, TokenRole::Image),
            (instruction, TokenRole::Instruction),
        ] {
            tokens.extend_from_slice(ids);
            roles.extend(std::iter::repeat(role).take(ids.len()));
        }
        let positions = (0..tokens.len()).collect();
        Self::new(tokens, roles, positions)
    }

    /// Random token ids in the LLaVA layout, drawn from a seeded ChaCha8 stream.
    pub fn synthetic(
        n_system: usize,
        n_image: usize,
        n_instruction: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<Self, RuntimeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<u32> {
            (0..n).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
        };
        let system = draw(n_system);
        let image = draw(n_image);
        let instruction = draw(n_instruction);
        Self::llava_layout(&system, &image, &instruction)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn count(&self, role: TokenRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn indices_with_role(&self, role: TokenRole) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Keeps the tokens at `keep` (ascending), preserving their original positions.
    pub fn retain_indices(&self, keep: &[usize]) -> Result<Self, RuntimeError> {
        let tokens = keep.iter().map(|&i| self.tokens[i]).collect();
        let roles = keep.iter().map(|&i| self.roles[i]).collect();
        let positions = keep.iter().map(|&i| self.positions[i]).collect();
        Self::new(tokens, roles, positions)
    }
}

fn check_layout(roles: &[TokenRole]) -> Result<(), RuntimeError> {
    let first_image = roles.iter().position(|&r| r == TokenRole::Image);
    let last_image = roles.iter().rposition(|&r| r == TokenRole::Image);
    if let (Some(first), Some(last)) = (first_image, last_image) {
        if roles[first..=last].iter().any(|&r| r != TokenRole::Image) {
            return Err(RuntimeError::InvalidSequence(
                "image tokens must form one contiguous block".into(),
            ));
        }
        if roles[..first].contains(&TokenRole::Instruction) {
            return Err(RuntimeError::InvalidSequence(
                "instruction tokens must follow the image block".into(),
            ));
        }
    }
    Ok(())
}
