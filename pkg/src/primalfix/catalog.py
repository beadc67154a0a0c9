"""Named reference graphs used by the simulations, the CLI and the tests."""

from __future__ import annotations

from .graph import Admg, Dag, Vertex

__all__ = [
    "back_door",
    "front_door_hidden",
    "front_door",
    "mediators_treatment_outcome_confounded",
    "mediators_chain_confounded",
    "mediators_outcome_outside",
    "ordinary_constraint",
    "verma_constraint",
    "CATALOG",
]

_CHAIN = [("X", "A"), ("X", "M"), ("X", "L"), ("X", "Y"), ("A", "M"), ("M", "L"), ("L", "Y")]


def back_door() -> Admg:
    """Treatment and outcome sharing only the observed confounder X."""
    return Admg.build(["X", "A", "Y"], [("X", "A"), ("X", "Y"), ("A", "Y")])


def front_door_hidden() -> Dag:
    """Front-door DAG with an unmeasured confounder U of A and Y."""
    return Dag.build(
        ["X", "A", "M", "Y", "U"],
        [("X", "A"), ("X", "M"), ("X", "Y"), ("A", "M"), ("M", "Y"), ("U", "A"), ("U", "Y")],
        hidden=["U"],
    )


def front_door() -> Admg:
    """Front-door ADMG: the latent projection of :func:`front_door_hidden`."""
    return Admg.build(
        ["X", "A", "M", "Y"],
        [("X", "A"), ("X", "M"), ("X", "Y"), ("A", "M"), ("M", "Y")],
        [("A", "Y")],
    )


def mediators_treatment_outcome_confounded(m_arity: int = 2, x_arity: int = 1) -> Admg:
    """Mediators M then L, with A->L, M->Y and A<->Y; the outcome shares A's district."""
    return Admg.build(
        [Vertex("X", x_arity), "A", Vertex("M", m_arity), "L", "Y"],
        _CHAIN + [("A", "L"), ("M", "Y")],
        [("A", "Y")],
    )


def mediators_chain_confounded(m_arity: int = 1) -> Admg:
    """Mediators M then L with A<->L<->Y."""
    return Admg.build(["X", "A", Vertex("M", m_arity), "L", "Y"], _CHAIN, [("A", "L"), ("L", "Y")])


def mediators_outcome_outside(m_arity: int = 2) -> Admg:
    """Mediators M then L with A->Y, A<->L and M<->Y; the outcome lies outside A's district."""
    return Admg.build(
        ["X", "A", Vertex("M", m_arity), "L", "Y"],
        _CHAIN + [("A", "Y")],
        [("A", "L"), ("M", "Y")],
    )


def ordinary_constraint() -> Admg:
    """Missing A-Y edge that encodes an ordinary conditional independence."""
    return Admg.build(["X", "A", "M", "L", "Y"], _CHAIN + [("M", "Y")], [("A", "L")])


def verma_constraint() -> Admg:
    """Missing A-Y edge that encodes only a generalized (nested) independence."""
    return Admg.build(["X", "A", "M", "L", "Y"], _CHAIN, [("A", "L"), ("M", "Y")])


CATALOG = {
    "back_door": back_door,
    "front_door": front_door,
    "mediators_treatment_outcome_confounded": mediators_treatment_outcome_confounded,
    "mediators_chain_confounded": mediators_chain_confounded,
    "mediators_outcome_outside": mediators_outcome_outside,
    "ordinary_constraint": ordinary_constraint,
    "verma_constraint": verma_constraint,
}
