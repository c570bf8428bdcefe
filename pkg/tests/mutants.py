"""Seeded hazards: copies of a kernel with one barrier wait removed."""

from dataclasses import replace

from regdem.isa import Instruction


def wait_mutants(kernel):
    for pos, item in enumerate(kernel.body):
        if not isinstance(item, Instruction):
            continue
        for b in sorted(item.control.wait_set):
            ctl = replace(item.control, wait_set=item.control.wait_set - {b})
            body = list(kernel.body)
            body[pos] = replace(item, control=ctl)
            yield pos, b, replace(kernel, body=body)
