use std::collections::VecDeque;

use serde::Serialize;

/// One kernel-facing port: an input FIFO the host pushes into and the DMP
/// drains, and an output FIFO the DMP fills and the host pulls from.
#[derive(Debug, Clone)]
pub struct StreamPort {
    capacity: usize,
    input: VecDeque<u8>,
    output: VecDeque<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct PortLevels {
    pub input: usize,
    pub output: usize,
    pub capacity: usize,
}

impl StreamPort {
    pub fn new(capacity: usize) -> Self {
        StreamPort { capacity, input: VecDeque::new(), output: VecDeque::new() }
    }

    pub fn levels(&self) -> PortLevels {
        PortLevels { input: self.input.len(), output: self.output.len(), capacity: self.capacity }
    }

    /// Host side: accepts as much of `data` as fits and returns the count.
    pub fn push_input(&mut self, data: &[u8]) -> usize {
        let n = data.len().min(self.capacity - self.input.len());
        self.input.extend(&data[..n]);
        n
    }

    /// DMP side: takes up to `max` bytes.
    pub fn take_input(&mut self, max: usize) -> Vec<u8> {
        let n = max.min(self.input.len());
        self.input.drain(..n).collect()
    }

    /// DMP side: accepts as much of `data` as fits and returns the count.
    pub fn push_output(&mut self, data: &[u8]) -> usize {
        let n = data.len().min(self.capacity - self.output.len());
        self.output.extend(&data[..n]);
        n
    }

    /// Host side: takes up to `max` bytes.
    pub fn pull_output(&mut self, max: usize) -> Vec<u8> {
        let n = max.min(self.output.len());
        self.output.drain(..n).collect()
    }
}
