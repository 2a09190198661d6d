use crate::dataio::Manifest;
use crate::error::Result;
use crate::image::GrayImage;
use crate::supervision::Annotation;
use crate::tinynet::Tensor;

/// Indexed source of training or evaluation scenes.
pub trait Dataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn image(&self, index: usize) -> Result<Tensor>;

    fn annotations(&self, index: usize) -> Result<Vec<Annotation>>;
}

impl Dataset for Manifest {
    fn len(&self) -> usize {
        Manifest::len(self)
    }

    fn image(&self, index: usize) -> Result<Tensor> {
        Ok(Manifest::image(self, index)?.to_tensor())
    }

    fn annotations(&self, index: usize) -> Result<Vec<Annotation>> {
        Manifest::annotations(self, index)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pub scenes: Vec<(GrayImage, Vec<Annotation>)>,
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.scenes.len()
    }

    fn image(&self, index: usize) -> Result<Tensor> {
        Ok(self.scenes[index].0.to_tensor())
    }

    fn annotations(&self, index: usize) -> Result<Vec<Annotation>> {
        Ok(self.scenes[index].1.clone())
    }
}
