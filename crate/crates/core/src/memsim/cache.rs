//! Fully-associative cache level with exact LRU and a streaming eviction class.

use rustc_hash::FxHashMap;

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineState {
    pub streaming: bool,
    pub dirty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Evicted {
    pub tag: u64,
    pub dirty: bool,
}

#[derive(Debug, Clone)]
struct Node {
    tag: u64,
    state: LineState,
    prev: u32,
    next: u32,
}

/// Doubly linked list threaded through the node slab; head is LRU, tail MRU.
#[derive(Debug, Clone, Copy)]
struct List {
    head: u32,
    tail: u32,
    len: u32,
}

impl List {
    const EMPTY: List = List {
        head: NIL,
        tail: NIL,
        len: 0,
    };
}

/// One cache level holding line tags (`addr / line_bytes`).
///
/// Lines live in one of two recency lists. Victims come from the streaming
/// list while it is non-empty, otherwise from the default list, and in both
/// cases the least recently used line goes first.
#[derive(Debug, Clone)]
pub struct CacheLevel {
    capacity_bytes: u64,
    line_bytes: u64,
    max_lines: u32,
    nodes: Vec<Node>,
    free: Vec<u32>,
    map: FxHashMap<u64, u32>,
    // index 0: default class, 1: streaming class
    lists: [List; 2],
}

impl CacheLevel {
    pub fn new(capacity_bytes: u64, line_bytes: u64) -> Self {
        assert!(line_bytes > 0, "line size must be positive");
        let max_lines = u32::try_from(capacity_bytes / line_bytes).expect("too many cache lines");
        Self {
            capacity_bytes,
            line_bytes,
            max_lines,
            nodes: Vec::new(),
            free: Vec::new(),
            map: FxHashMap::default(),
            lists: [List::EMPTY; 2],
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn line_bytes(&self) -> u64 {
        self.line_bytes
    }

    pub fn capacity_lines(&self) -> usize {
        self.max_lines as usize
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, tag: u64) -> bool {
        self.map.contains_key(&tag)
    }

    pub fn state(&self, tag: u64) -> Option<LineState> {
        self.map.get(&tag).map(|&i| self.nodes[i as usize].state)
    }

    /// Marks a resident line most recently used, moving it to the class given
    /// by `streaming`. Returns false if the line is not resident.
    pub fn touch(&mut self, tag: u64, streaming: bool) -> bool {
        let Some(&idx) = self.map.get(&tag) else {
            return false;
        };
        self.unlink(idx);
        self.nodes[idx as usize].state.streaming = streaming;
        self.push_back(idx);
        true
    }

    pub fn set_dirty(&mut self, tag: u64, dirty: bool) {
        if let Some(&idx) = self.map.get(&tag) {
            self.nodes[idx as usize].state.dirty = dirty;
        }
    }

    /// Inserts a line that is not resident, evicting at most one victim.
    /// If the line is already resident it is touched and its dirty bit ORed.
    pub fn insert(&mut self, tag: u64, state: LineState) -> Option<Evicted> {
        if let Some(&idx) = self.map.get(&tag) {
            self.nodes[idx as usize].state.dirty |= state.dirty;
            self.touch(tag, state.streaming);
            return None;
        }
        if self.max_lines == 0 {
            return Some(Evicted {
                tag,
                dirty: state.dirty,
            });
        }
        let evicted = if self.map.len() as u32 >= self.max_lines {
            self.evict_one()
        } else {
            None
        };
        let node = Node {
            tag,
            state,
            prev: NIL,
            next: NIL,
        };
        let idx = match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = node;
                i
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        };
        self.map.insert(tag, idx);
        self.push_back(idx);
        evicted
    }

    pub fn remove(&mut self, tag: u64) -> Option<LineState> {
        let idx = self.map.remove(&tag)?;
        self.unlink(idx);
        self.free.push(idx);
        Some(self.nodes[idx as usize].state)
    }

    /// The line that the next insertion into a full cache would displace.
    pub fn victim(&self) -> Option<u64> {
        let list = if self.lists[1].len > 0 {
            self.lists[1]
        } else {
            self.lists[0]
        };
        (list.head != NIL).then(|| self.nodes[list.head as usize].tag)
    }

    fn evict_one(&mut self) -> Option<Evicted> {
        let tag = self.victim()?;
        let state = self.remove(tag)?;
        Some(Evicted {
            tag,
            dirty: state.dirty,
        })
    }

    /// Tags of dirty lines, default class then streaming class, LRU first.
    pub fn dirty_tags(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for list in self.lists {
            let mut cur = list.head;
            while cur != NIL {
                let node = &self.nodes[cur as usize];
                if node.state.dirty {
                    out.push(node.tag);
                }
                cur = node.next;
            }
        }
        out
    }

    /// Resident tags in eviction order (streaming LRU..MRU, then default LRU..MRU).
    pub fn eviction_order(&self) -> Vec<u64> {
        let mut out = Vec::with_capacity(self.map.len());
        for list in [self.lists[1], self.lists[0]] {
            let mut cur = list.head;
            while cur != NIL {
                out.push(self.nodes[cur as usize].tag);
                cur = self.nodes[cur as usize].next;
            }
        }
        out
    }

    fn class(&self, idx: u32) -> usize {
        usize::from(self.nodes[idx as usize].state.streaming)
    }

    fn unlink(&mut self, idx: u32) {
        let class = self.class(idx);
        let Node { prev, next, .. } = self.nodes[idx as usize];
        if prev == NIL {
            self.lists[class].head = next;
        } else {
            self.nodes[prev as usize].next = next;
        }
        if next == NIL {
            self.lists[class].tail = prev;
        } else {
            self.nodes[next as usize].prev = prev;
        }
        self.lists[class].len -= 1;
        let node = &mut self.nodes[idx as usize];
        node.prev = NIL;
        node.next = NIL;
    }

    fn push_back(&mut self, idx: u32) {
        let class = self.class(idx);
        let tail = self.lists[class].tail;
        self.nodes[idx as usize].prev = tail;
        self.nodes[idx as usize].next = NIL;
        if tail == NIL {
            self.lists[class].head = idx;
        } else {
            self.nodes[tail as usize].next = idx;
        }
        self.lists[class].tail = idx;
        self.lists[class].len += 1;
    }
}
