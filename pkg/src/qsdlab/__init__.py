"""qsdlab: quasi-stationary behaviour of multitype birth-and-death processes.

Submodules:

``model``          rate fields, fixed point, hypothesis audit
``sim``            exact simulation, hitting times, descent experiments
``ode``            deterministic limit flow and the Kurtz deviation
``spectral``       truncated killed generator and the QSD eigen-triple
``conditioned``    conditioned laws, total variation, Fleming-Viot
``lyapunov``       exponential Lyapunov drift, four-domains constants
``reversibility``  circuit criterion and reversible measures
"""

__version__ = "0.1.0"
