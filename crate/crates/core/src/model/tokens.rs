//! Byte-level vocabulary and mixed-modality token sequences.

use super::ModelError;

pub type TokenId = u32;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
/// Placeholder id carried by positions that receive merger embeddings.
pub const IMAGE_SLOT: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn is_special(id: TokenId) -> bool {
    id >= PAD
}

/// Decodes byte tokens to text, dropping specials.
pub fn decode(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

/// A decoder input sequence. Visual positions carry [`IMAGE_SLOT`] and the
/// merged-grid coordinates of the token that fills them; every position,
/// visual or not, consumes one 1D decoder position.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    modality: Vec<Modality>,
    text_pos: Vec<usize>,
    vis_rows: Vec<Option<usize>>,
    vis_cols: Vec<Option<usize>>,
}

impl TokenSeq {
    pub fn new(
        ids: Vec<TokenId>,
        modality: Vec<Modality>,
        text_pos: Vec<usize>,
        vis_rows: Vec<Option<usize>>,
        vis_cols: Vec<Option<usize>>,
    ) -> Result<Self, ModelError> {
        let n = ids.len();
        if [
            modality.len(),
            text_pos.len(),
            vis_rows.len(),
            vis_cols.len(),
        ]
        .iter()
        .any(|&l| l != n)
        {
            return Err(ModelError::InvalidSequence("field lengths differ".into()));
        }
        for t in 0..n {
            let visual = modality[t] == Modality::Visual;
            if visual != vis_rows[t].is_some() || visual != vis_cols[t].is_some() {
                return Err(ModelError::InvalidSequence(format!(
                    "position {t}: grid coordinates must be present exactly on visual slots"
                )));
            }
            if visual != (ids[t] == IMAGE_SLOT) {
                return Err(ModelError::InvalidSequence(format!(
                    "position {t}: image-slot id and visual modality disagree"
                )));
            }
            if t > 0 && text_pos[t] <= text_pos[t - 1] {
                return Err(ModelError::InvalidSequence(
                    "text_pos must be strictly increasing".into(),
                ));
            }
        }
        Ok(Self {
            ids,
            modality,
            text_pos,
            vis_rows,
            vis_cols,
        })
    }

    pub fn from_ids(ids: &[TokenId]) -> Result<Self, ModelError> {
        let mut seq = Self::default();
        for &id in ids {
            seq.push_text(id)?;
        }
        Ok(seq)
    }

    fn next_pos(&self) -> usize {
        self.text_pos.last().map_or(0, |p| p + 1)
    }

    pub fn push_text(&mut self, id: TokenId) -> Result<(), ModelError> {
        if id == IMAGE_SLOT {
            return Err(ModelError::InvalidSequence(
                "text position cannot hold the image-slot id".into(),
            ));
        }
        let pos = self.next_pos();
        self.ids.push(id);
        self.modality.push(Modality::Text);
        self.text_pos.push(pos);
        self.vis_rows.push(None);
        self.vis_cols.push(None);
        Ok(())
    }

    /// Appends `grid_rows × grid_cols` visual slots in row-major order.
    pub fn push_image(&mut self, grid_rows: usize, grid_cols: usize) {
        for r in 0..grid_rows {
            for c in 0..grid_cols {
                let pos = self.next_pos();
                self.ids.push(IMAGE_SLOT);
                self.modality.push(Modality::Visual);
                self.text_pos.push(pos);
                self.vis_rows.push(Some(r));
                self.vis_cols.push(Some(c));
            }
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn modality(&self) -> &[Modality] {
        &self.modality
    }

    pub fn text_pos(&self) -> &[usize] {
        &self.text_pos
    }

    pub fn grid_coords(&self, t: usize) -> Option<(usize, usize)> {
        self.vis_rows[t].zip(self.vis_cols[t])
    }

    pub fn visual_count(&self) -> usize {
        self.modality
            .iter()
            .filter(|&&m| m == Modality::Visual)
            .count()
    }

    pub fn text_count(&self) -> usize {
        self.len() - self.visual_count()
    }

    /// Copy of the first `n` positions.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            ids: self.ids[..n].to_vec(),
            modality: self.modality[..n].to_vec(),
            text_pos: self.text_pos[..n].to_vec(),
            vis_rows: self.vis_rows[..n].to_vec(),
            vis_cols: self.vis_cols[..n].to_vec(),
        }
    }
}
