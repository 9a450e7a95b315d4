"""
Token Trie
Character-level vocabulary, prompt / output encoding and the prefix trie
that turns an output space into next-token targets q(v | prefix).
"""

import logging
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import dist_engine
from dist_engine import DistributionSpec
from discretizer import OutputSpace

logger = logging.getLogger(__name__)

CHAR_TOKENS = tuple('0123456789') + ('.', '-')
EOS = '<eos>'
BOS = '<bos>'
SEP = '<sep>'
FAMILY_PREFIX = 'FAM_'
PARAM_PREFIX = 'PAR_'
PROMPT_DECIMALS = 5


class VocabularyError(KeyError):
    """Raised for tokens, families or parameters missing from the vocabulary."""

    def __init__(self, message: str = "Unknown token"):
        super().__init__(message)


class TriePathError(KeyError):
    """Raised when a token prefix does not exist in the trie."""

    def __init__(self, message: str = "Prefix not present in trie"):
        super().__init__(message)


class Vocabulary:
    """Dense token ids: characters, special markers, family and parameter tags."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens: Tuple[str, ...] = tuple(tokens)
        self.index: Dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabularyError("Duplicate tokens in vocabulary")
        for special in (EOS, BOS, SEP):
            if special not in self.index:
                raise VocabularyError(f"Vocabulary is missing {special}")
        self.eos_id = self.index[EOS]
        self.bos_id = self.index[BOS]
        self.sep_id = self.index[SEP]

    @classmethod
    def default(cls) -> 'Vocabulary':
        families = dist_engine.family_names()
        params: List[str] = []
        for fam in families:
            for name in dist_engine.parameter_names(fam):
                if name not in params:
                    params.append(name)
        tokens = list(CHAR_TOKENS) + [EOS, BOS, SEP]
        tokens += [FAMILY_PREFIX + f for f in families]
        tokens += [PARAM_PREFIX + p for p in params]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise VocabularyError(f"Token {token!r} is not in the vocabulary")

    def token(self, token_id: int) -> str:
        return self.tokens[int(token_id)]

    def to_list(self) -> List[str]:
        return list(self.tokens)


def tokenize_output(vocab: Vocabulary, canonical: str) -> List[int]:
    """Character ids of a canonical string followed by EOS."""
    ids = []
    for ch in canonical:
        if ch not in CHAR_TOKENS:
            raise VocabularyError(f"Character {ch!r} in {canonical!r} is not an output token")
        ids.append(vocab.id(ch))
    ids.append(vocab.eos_id)
    return ids


def detokenize(vocab: Vocabulary, tokens: Sequence[int]) -> str:
    ids = list(tokens)
    if ids and ids[-1] == vocab.eos_id:
        ids = ids[:-1]
    return ''.join(vocab.token(t) for t in ids)


def format_prompt_value(value: float) -> str:
    text = f"{float(value):.{PROMPT_DECIMALS}f}"
    return text[1:] if text.startswith('-') and float(text) == 0.0 else text


def encode_prompt(vocab: Vocabulary, config) -> List[int]:
    """[BOS, family tag, (param tag, value chars)..., SEP].

    Accepts a DistributionSpec or anything carrying one as ``.spec``.
    """
    spec: DistributionSpec = getattr(config, 'spec', config)
    ids = [vocab.bos_id, vocab.id(FAMILY_PREFIX + spec.family)]
    for name, value in spec.params:
        ids.append(vocab.id(PARAM_PREFIX + name))
        ids.extend(vocab.id(ch) for ch in format_prompt_value(value))
    ids.append(vocab.sep_id)
    return ids


class TrieNode:
    __slots__ = ('prefix_mass', 'children')

    def __init__(self):
        self.prefix_mass = 0.0
        self.children: Dict[int, 'TrieNode'] = {}

    def is_leaf(self) -> bool:
        return not self.children


class TokenTrie:
    def __init__(self, root: TrieNode, eos_id: int):
        self.root = root
        self.eos_id = eos_id

    def node(self, prefix: Sequence[int]) -> TrieNode:
        node = self.root
        for tok in prefix:
            child = node.children.get(int(tok))
            if child is None:
                raise TriePathError(f"Prefix {list(prefix)} leaves the trie at token {tok}")
            node = child
        return node

    def find(self, prefix: Sequence[int]) -> Optional[TrieNode]:
        try:
            return self.node(prefix)
        except TriePathError:
            return None

    def path_targets(self, path: Sequence[int]) -> List[Dict[int, float]]:
        """q(. | p_k) for every proper prefix p_0 .. p_L of an EOS-terminated path."""
        targets = []
        node = self.root
        for tok in path:
            targets.append({t: c.prefix_mass / node.prefix_mass for t, c in node.children.items()})
            child = node.children.get(int(tok))
            if child is None:
                raise TriePathError(f"Path {list(path)} leaves the trie at token {tok}")
            node = child
        if not node.is_leaf():
            raise TriePathError(f"Path {list(path)} does not end at a leaf")
        return targets

    def sample_path(self, rng: np.random.Generator) -> List[int]:
        path = []
        node = self.root
        while node.children:
            tokens = list(node.children)
            cum = np.cumsum([node.children[t].prefix_mass for t in tokens])
            idx = int(np.searchsorted(cum, rng.random() * node.prefix_mass, side='right'))
            tok = tokens[min(idx, len(tokens) - 1)]
            path.append(tok)
            node = node.children[tok]
        return path

    def enumerate_paths(self) -> Iterator[Tuple[List[int], float]]:
        stack = [(self.root, [])]
        while stack:
            node, prefix = stack.pop()
            if node.is_leaf():
                yield prefix, node.prefix_mass
                continue
            for tok in reversed(list(node.children)):
                stack.append((node.children[tok], prefix + [tok]))

    def leaf_count(self) -> int:
        return sum(1 for _ in self.enumerate_paths())

    def node_count(self) -> int:
        return sum(1 for _ in self.iter_nodes())

    def iter_nodes(self) -> Iterator[TrieNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def to_record(self, vocab: Optional[Vocabulary] = None) -> Dict:
        def render(node: TrieNode) -> Dict:
            out = {'mass': f"{node.prefix_mass:.12g}"}
            if node.children:
                out['children'] = {
                    (vocab.token(t) if vocab else str(t)): render(c) for t, c in node.children.items()
                }
            return out
        return render(self.root)


def next_token_target(trie: TokenTrie, prefix: Sequence[int]) -> Dict[int, float]:
    node = trie.node(prefix)
    return {t: c.prefix_mass / node.prefix_mass for t, c in node.children.items()}


def _sort_children(node: TrieNode):
    stack = [node]
    while stack:
        n = stack.pop()
        if n.children:
            n.children = {t: n.children[t] for t in sorted(n.children)}
            stack.extend(n.children.values())


def build_trie(space: OutputSpace, vocab: Vocabulary) -> TokenTrie:
    """Prefix trie over the positive-mass canonicals; zero-mass entries are skipped."""
    root = TrieNode()
    for canonical, mass in zip(space.canonicals, space.masses):
        if mass <= 0:
            continue
        mass = float(mass)
        node = root
        node.prefix_mass += mass
        for tok in tokenize_output(vocab, canonical):
            child = node.children.get(tok)
            if child is None:
                child = TrieNode()
                node.children[tok] = child
            child.prefix_mass += mass
            node = child
    _sort_children(root)
    trie = TokenTrie(root, vocab.eos_id)
    logger.debug(f"[TRIE] built over {len(space)} entries, root mass {root.prefix_mass:.12f}")
    return trie


def trie_from_masses(masses: Mapping[str, float], vocab: Vocabulary) -> TokenTrie:
    return build_trie(OutputSpace.from_masses(masses), vocab)
