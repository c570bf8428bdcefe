"""Register compaction over a relocation space.

Gaps left in the register numbering are pushed to the end by shifting
registers down and, when a 64-bit pair cannot land on an odd gap, by
swapping the pair with the window of registers just below it.
"""

from __future__ import annotations

from dataclasses import dataclass

from .isa import AsmError, RegisterRef, register_groups

BANKS = 4


@dataclass(frozen=True)
class Slot:
    lead: int
    width: int
    position: int  # 0 for the leading word of a group


@dataclass
class RelocationSpace:
    slots: list  # Slot or None per physical register

    @property
    def units(self):
        return [(s.lead, s.width) for s in self.slots if s is not None and s.position == 0]

    def __len__(self):
        return len(self.slots)

    def gaps(self):
        return [i for i, s in enumerate(self.slots) if s is None]

    def render(self):
        """Compact text form, e.g. ``S0 . D2+3``."""
        out = []
        for i, s in enumerate(self.slots):
            if s is None:
                out.append(".")
            elif s.width == 1:
                out.append(f"S{i}")
            elif s.position == 0:
                out.append(f"D{i}+{i + 1}")
        return " ".join(out)

    @classmethod
    def from_units(cls, units, size=None):
        top = max((lead + width for lead, width in units), default=0)
        slots = [None] * (top if size is None else size)
        for lead, width in units:
            if width == 2 and lead % 2:
                raise AsmError(f"group at R{lead} is not aligned")
            for k in range(width):
                if slots[lead + k] is not None:
                    raise AsmError(f"overlapping register groups at R{lead + k}")
                slots[lead + k] = Slot(lead, width, k)
        return cls(slots)


def build_relocation_space(kernel):
    units = sorted(set(register_groups(kernel).values()))
    return RelocationSpace.from_units(units, size=kernel.reg_count)


class _Packer:
    """Output register file filled left to right."""

    def __init__(self, swapping=True):
        self.placed = []  # (lead, width) per slot, or None
        self.new = {}
        self.swapping = swapping

    def copy(self):
        p = _Packer(self.swapping)
        p.placed = list(self.placed)
        p.new = dict(self.new)
        return p

    def free_position(self):
        for i, s in enumerate(self.placed):
            if s is None:
                return i
        return len(self.placed)

    def place(self, unit):
        lead, width = unit
        if width == 1:
            pos = self.free_position()
            if pos == len(self.placed):
                self.placed.append(unit)
            else:
                self.placed[pos] = unit
            self.new[lead] = pos
            return
        p = len(self.placed)
        if p % 2 == 0:
            self.placed.extend([unit, unit])
            self.new[lead] = p
            return
        below = self.placed[p - 1]
        if self.swapping and below is not None and below[1] == 1:
            # swap the pair with the window [p-1, p]: the single moves above it
            self.placed[p - 1:] = [unit, unit, below]
            self.new[lead] = p - 1
            self.new[below[0]] = p + 1
            return
        self.placed.extend([None, unit, unit])
        self.new[lead] = p + 1

    @property
    def size(self):
        return len(self.placed)


def _moves(packer):
    return {old: new for old, new in packer.new.items() if old != new}


def compact(space, swapping=True):
    """Renaming map ``old lead -> new lead`` for every register that moves."""
    packer = _Packer(swapping)
    for unit in space.units:
        packer.place(unit)
    return _moves(packer)


def _plain_size(packer, queue):
    p = packer.copy()
    for unit in queue:
        p.place(unit)
    return p.size


def compact_bank_aware(space, kernel=None, window=BANKS, swapping=True):
    """Like :func:`compact`, but fill each position with a register from the
    same bank when one is among the next ``window`` candidates, unless that
    choice would end with more registers than the plain rule.

    With swapping on, a pair never needs padding, so the fallback only
    matters when swapping is off.
    """
    packer = _Packer(swapping)
    queue = list(space.units)
    while queue:
        pos = packer.free_position()
        pick = 0
        for i, (lead, width) in enumerate(queue[:window]):
            if width == 1 and lead % BANKS == pos % BANKS:
                pick = i
                break
        if pick:
            alt_queue = queue[:pick] + queue[pick + 1:]
            trial = packer.copy()
            trial.place(queue[pick])
            plain = packer.copy()
            plain.place(queue[0])
            if _plain_size(trial, alt_queue) > _plain_size(plain, queue[1:]):
                pick = 0
        packer.place(queue.pop(pick))
    return _moves(packer)


def compacted_size(kernel, bank_aware=False):
    space = build_relocation_space(kernel)
    mapping = compact_bank_aware(space, kernel) if bank_aware else compact(space)
    return renamed_reg_count(space, mapping)


def renamed_reg_count(space, mapping):
    top = 0
    for lead, width in space.units:
        top = max(top, mapping.get(lead, lead) + width)
    return top


def word_map(kernel, mapping):
    """Expand a lead->lead map to every word, aliases included."""
    groups = register_groups(kernel)
    words = {}
    for w, (lead, width) in groups.items():
        new_lead = mapping.get(lead, lead)
        words[w] = new_lead + (w - lead)
    return words


def apply_renaming(kernel, mapping):
    """Rename every register operand of ``kernel`` through ``mapping``."""
    if not mapping:
        return kernel.copy()
    words = word_map(kernel, mapping)
    if len(set(words.values())) != len(words):
        raise ValueError("renaming map would merge distinct registers")

    def conv(ref):
        new = words.get(ref.index, ref.index)
        if ref.width == 2 and new % 2:
            raise ValueError(f"renaming misaligns 64-bit register R{ref.index}")
        return RegisterRef(new, ref.width)

    body = [item.map_registers(conv) if hasattr(item, "map_registers") else item for item in kernel.body]
    return kernel.with_body(body)
