# %% [markdown]
# # krflow notebook example
#
# This page is generated from a Jupytext percent script.
# It flows a perturbed Fubini-Study potential on CP^1 for a short time and plots the ledger.
#
# The same run from a shell (not executed here):
#
# ```bash
# uv sync
# uv run krflow run-flow --config configs/cp1_flow.toml
# uv run krflow status
# ```

# %%
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from krflow import __version__
from krflow.bergman import density_of_states
from krflow.flow import FlowSettings, run
from krflow.functionals import functional_ledger
from krflow.geometry import Grid, get_model, make_perturbation, reference_field

print("krflow version:", __version__)

# %% [markdown]
# ## A short flow
#
# The Gaussian bump is a perturbation of the Kähler-Einstein potential, so the flow relaxes back to
# constant curvature and the Dirichlet energy of phidot decays exponentially.

# %%
model = get_model("cp1", m_max=16)
grid = Grid(half_width=20.0, points_per_axis=401)
start = reference_field(model, grid).with_u(make_perturbation(grid, "bump", amplitude=0.3, width=1.5))
traj = run(start, FlowSettings(horizon=2.0, sample_every=0.1))
ledger = traj.ledger()
ledger.head()

# %%
fig = make_subplots(rows=1, cols=2, subplot_titles=("Dirichlet energy of phidot", "sup |R| on the resolved region"))
fig.add_trace(go.Scatter(x=ledger["t"], y=ledger["dirichlet_E"], mode="lines+markers", name="E"), row=1, col=1)
fig.add_trace(go.Scatter(x=ledger["t"], y=ledger["sup_R"], mode="lines+markers", name="sup R"), row=1, col=2)
fig.update_yaxes(type="log", row=1, col=1)
fig.update_layout(height=380, showlegend=False)
fig.show()

# %% [markdown]
# ## Functionals along the flow
#
# The Mabuchi energy decreases with rate `-E`; L~_m tracks `M / 2` up to a drift that shrinks with m.

# %%
fl = functional_ledger(traj, [4, 8])
fig = go.Figure()
fig.add_trace(go.Scatter(x=fl.frame["t"], y=0.5 * fl.frame["M"], name="M / 2"))
for m in (4, 8):
    fig.add_trace(go.Scatter(x=fl.frame["t"], y=fl.frame[f"Ltilde_{m}"], name=f"L~_{m}"))
fig.update_layout(height=380, xaxis_title="t")
fig.show()

# %% [markdown]
# ## Density of states
#
# For the Fubini-Study metric the density is exactly `m + 1/2`; the perturbed metric deviates by
# `R / 2` to leading order.

# %%
fig = go.Figure()
for label, phi in (("Fubini-Study", reference_field(model, grid)), ("perturbed", start)):
    dos = density_of_states(phi, 8)
    fig.add_trace(go.Scatter(x=grid.axis, y=dos.rho, name=label))
fig.update_layout(height=380, xaxis_title="x = log|z|^2", yaxis_title="rho_8")
fig.show()
